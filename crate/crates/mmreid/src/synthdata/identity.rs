//! Attribute-defined identities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HUES: [&str; 8] = [
    "crimson", "navy", "olive", "charcoal", "ivory", "teal", "mustard", "violet",
];
pub const HATS: [&str; 3] = ["none", "dark", "light"];
pub const BAGS: [&str; 3] = ["none", "left", "right"];
pub const BUILDS: [&str; 2] = ["slim", "broad"];

/// 8 shirt × 8 pants × 8 shoe hues × 3 hats × 3 bags × 2 builds.
pub const ATTRIBUTE_SPACE: usize = 8 * 8 * 8 * 3 * 3 * 2;

/// One person: a dataset-local label plus the attribute tuple that fully
/// determines both appearance and caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub id: usize,
    pub shirt: usize,
    pub pants: usize,
    pub shoes: usize,
    pub hat: usize,
    pub bag: usize,
    pub build: usize,
}

impl IdentitySpec {
    /// Decode a mixed-radix index over (shirt, pants, shoes, hat, bag, build).
    pub fn from_combo(id: usize, combo: usize) -> Result<Self> {
        if combo >= ATTRIBUTE_SPACE {
            return Err(Error::Data(format!(
                "attribute combo {combo} outside space of {ATTRIBUTE_SPACE}"
            )));
        }
        let mut c = combo;
        let build = c % 2;
        c /= 2;
        let bag = c % 3;
        c /= 3;
        let hat = c % 3;
        c /= 3;
        let shoes = c % 8;
        c /= 8;
        let pants = c % 8;
        c /= 8;
        let shirt = c;
        Ok(IdentitySpec {
            id,
            shirt,
            pants,
            shoes,
            hat,
            bag,
            build,
        })
    }

    pub fn combo(&self) -> usize {
        ((((self.shirt * 8 + self.pants) * 8 + self.shoes) * 3 + self.hat) * 3 + self.bag) * 2
            + self.build
    }
}
