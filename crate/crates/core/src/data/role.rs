use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The fixed inventory of semantic roles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Arg0,
    Arg1,
    Arg2,
    Arg3,
    Arg4,
    AScn,
    ADir,
    APrp,
    AMnr,
    ALoc,
    AGol,
}

impl Role {
    pub const COUNT: usize = 11;

    pub const ALL: [Role; Role::COUNT] = [
        Role::Arg0,
        Role::Arg1,
        Role::Arg2,
        Role::Arg3,
        Role::Arg4,
        Role::AScn,
        Role::ADir,
        Role::APrp,
        Role::AMnr,
        Role::ALoc,
        Role::AGol,
    ];

    /// Roles that name something visible and receive box annotations.
    pub const VISUAL: [Role; 3] = [Role::Arg0, Role::Arg1, Role::Arg2];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Role> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Arg0 => "Arg0",
            Role::Arg1 => "Arg1",
            Role::Arg2 => "Arg2",
            Role::Arg3 => "Arg3",
            Role::Arg4 => "Arg4",
            Role::AScn => "AScn",
            Role::ADir => "ADir",
            Role::APrp => "APrp",
            Role::AMnr => "AMnr",
            Role::ALoc => "ALoc",
            Role::AGol => "AGol",
        }
    }

    pub fn is_visual(self) -> bool {
        Self::VISUAL.contains(&self)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownRole(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_and_names_round_trip() {
        for (i, r) in Role::ALL.iter().enumerate() {
            assert_eq!(r.id(), i);
            assert_eq!(Role::from_id(i), Some(*r));
            assert_eq!(r.name().parse::<Role>().unwrap(), *r);
        }
        assert!("Arg9".parse::<Role>().is_err());
        assert_eq!(Role::from_id(11), None);
    }
}
