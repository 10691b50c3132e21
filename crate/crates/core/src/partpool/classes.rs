use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassId = u8;

pub const BACKGROUND: ClassId = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartClass {
    pub id: ClassId,
    pub name: String,
    pub is_composite: bool,
}

/// Combines the listed base classes into one composite class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeRule {
    pub sources: Vec<ClassId>,
    pub target: ClassId,
}

/// The ordered class table. Ids are dense in `[0, len)`; id 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    pub classes: Vec<PartClass>,
}

/// LIP human-parsing labels, background included.
const LIP_BASE: [&str; 20] = [
    "background",
    "hat",
    "hair",
    "glove",
    "sunglasses",
    "upper-clothes",
    "dress",
    "coat",
    "socks",
    "pants",
    "jumpsuits",
    "scarf",
    "skirt",
    "face",
    "left-arm",
    "right-arm",
    "left-leg",
    "right-leg",
    "left-shoe",
    "right-shoe",
];

pub mod lip {
    use super::ClassId;
    pub const HAT: ClassId = 1;
    pub const HAIR: ClassId = 2;
    pub const GLOVE: ClassId = 3;
    pub const SUNGLASSES: ClassId = 4;
    pub const UPPER_CLOTHES: ClassId = 5;
    pub const SOCKS: ClassId = 8;
    pub const PANTS: ClassId = 9;
    pub const SCARF: ClassId = 11;
    pub const FACE: ClassId = 13;
    pub const LEFT_ARM: ClassId = 14;
    pub const RIGHT_ARM: ClassId = 15;
    pub const LEFT_LEG: ClassId = 16;
    pub const RIGHT_LEG: ClassId = 17;
    pub const LEFT_SHOE: ClassId = 18;
    pub const RIGHT_SHOE: ClassId = 19;

    pub const LEFT_LEG_SHOE: ClassId = 20;
    pub const RIGHT_LEG_SHOE: ClassId = 21;
    pub const LEFT_ARM_GLOVE: ClassId = 22;
    pub const RIGHT_ARM_GLOVE: ClassId = 23;
    pub const UPPER_BODY: ClassId = 24;
    pub const LOWER_BODY: ClassId = 25;
    pub const HEAD: ClassId = 26;
}

impl ClassCatalog {
    /// The 19 LIP part labels plus seven composites: 26 usable part types.
    pub fn lip_default() -> Self {
        let mut classes: Vec<PartClass> = LIP_BASE
            .iter()
            .enumerate()
            .map(|(i, n)| PartClass {
                id: i as ClassId,
                name: n.to_string(),
                is_composite: false,
            })
            .collect();
        for name in [
            "left-leg+left-shoe",
            "right-leg+right-shoe",
            "left-arm+glove",
            "right-arm+glove",
            "upper-clothes+arms",
            "pants+legs",
            "hair+face",
        ] {
            classes.push(PartClass {
                id: classes.len() as ClassId,
                name: name.to_string(),
                is_composite: true,
            });
        }
        ClassCatalog { classes }
    }

    /// Number of ids including background (`C`).
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Number of classes that can yield pool entries (`C - 1`).
    pub fn usable(&self) -> usize {
        self.classes.len().saturating_sub(1)
    }

    pub fn get(&self, id: ClassId) -> Option<&PartClass> {
        self.classes.get(id as usize)
    }

    pub fn by_name(&self, name: &str) -> Option<&PartClass> {
        self.classes.iter().find(|c| c.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("class catalog is empty".into()));
        }
        if self.classes.len() > 256 {
            return Err(Error::Config("at most 256 classes are supported".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.id as usize != i {
                return Err(Error::Config(format!(
                    "class ids must be dense: position {i} holds id {}",
                    c.id
                )));
            }
        }
        if self.classes[0].is_composite {
            return Err(Error::Config("id 0 is reserved for background".into()));
        }
        Ok(())
    }

    pub fn validate_rule(&self, rule: &MergeRule) -> Result<()> {
        let target = self
            .get(rule.target)
            .ok_or_else(|| Error::Config(format!("merge target {} is not declared", rule.target)))?;
        if !target.is_composite {
            return Err(Error::Config(format!(
                "merge target {} ({}) is not a composite class",
                target.id, target.name
            )));
        }
        if rule.sources.len() < 2 {
            return Err(Error::Config("merge rule needs at least two sources".into()));
        }
        for (i, &s) in rule.sources.iter().enumerate() {
            let class = self
                .get(s)
                .ok_or_else(|| Error::Config(format!("merge source {s} is not declared")))?;
            if class.is_composite || s == BACKGROUND {
                return Err(Error::Config(format!("merge source {s} is not a base part class")));
            }
            if rule.sources[..i].contains(&s) {
                return Err(Error::Config(format!("merge source {s} listed twice")));
            }
        }
        Ok(())
    }
}

/// Merge rules matching [`ClassCatalog::lip_default`].
pub fn default_merge_rules() -> Vec<MergeRule> {
    use lip::*;
    vec![
        MergeRule { sources: vec![LEFT_LEG, LEFT_SHOE], target: LEFT_LEG_SHOE },
        MergeRule { sources: vec![RIGHT_LEG, RIGHT_SHOE], target: RIGHT_LEG_SHOE },
        MergeRule { sources: vec![LEFT_ARM, GLOVE], target: LEFT_ARM_GLOVE },
        MergeRule { sources: vec![RIGHT_ARM, GLOVE], target: RIGHT_ARM_GLOVE },
        MergeRule { sources: vec![UPPER_CLOTHES, LEFT_ARM, RIGHT_ARM], target: UPPER_BODY },
        MergeRule { sources: vec![PANTS, LEFT_LEG, RIGHT_LEG], target: LOWER_BODY },
        MergeRule { sources: vec![HAIR, FACE], target: HEAD },
    ]
}

/// Accessory classes with little pose information.
pub fn default_excluded() -> Vec<ClassId> {
    vec![lip::SUNGLASSES, lip::SCARF, lip::SOCKS]
}
