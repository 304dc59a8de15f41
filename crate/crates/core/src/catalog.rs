//! Attribute groups, prompt templates and seen/unseen splits.
//!
//! An attribute is identified by its group plus its value, so the same word
//! may appear in several groups ("plaid" upper body vs. "plaid" lower body)
//! as distinct attributes.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SLOT: &str = "{}";

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("catalog line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid catalog: {0}")]
    Validation(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeGroup {
    pub key: String,
    pub template: String,
    pub attributes: Vec<String>,
    /// Vertical body interval `[lo, hi)` as fractions of image height.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<[f64; 2]>,
}

impl AttributeGroup {
    pub fn new(key: &str, template: &str, attributes: &[&str]) -> Self {
        Self {
            key: key.to_string(),
            template: template.to_string(),
            attributes: attributes.iter().map(|s| s.to_string()).collect(),
            region: None,
        }
    }

    pub fn position(&self, value: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a == value)
    }

    /// Interval used for the region mask: the explicit one, else the default
    /// for well-known body-part keys, else the whole body.
    pub fn region_interval(&self) -> [f64; 2] {
        self.region.unwrap_or_else(|| default_region(&self.key))
    }
}

/// Body intervals for the standard pedestrian groups.
pub fn default_region(key: &str) -> [f64; 2] {
    match key.to_ascii_lowercase().as_str() {
        "hair" | "accessory" => [0.0, 0.25],
        "gender" | "age" => [0.0, 1.0],
        "upperbody" | "carry" => [0.2, 0.6],
        "lowerbody" => [0.55, 0.9],
        "foot" => [0.85, 1.0],
        _ => [0.0, 1.0],
    }
}

/// A (group, attribute) pair, both as indices into the catalog.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AttrRef {
    pub group: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub group: String,
    pub attribute: String,
    pub sentence: String,
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.sentence)
    }
}

/// Fills the template slot of `group` with `attribute`. The attribute need
/// not belong to the group.
pub fn render_prompt(group: &AttributeGroup, attribute: &str) -> Prompt {
    Prompt {
        group: group.key.clone(),
        attribute: attribute.to_string(),
        sentence: group.template.replacen(SLOT, attribute, 1),
    }
}

/// Ordered attribute groups plus the set of attributes held out of training.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeCatalog {
    groups: Vec<AttributeGroup>,
    unseen: BTreeSet<AttrRef>,
}

impl AttributeCatalog {
    pub fn new(groups: Vec<AttributeGroup>) -> Result<Self, CatalogError> {
        validate(&groups)?;
        Ok(Self {
            groups,
            unseen: BTreeSet::new(),
        })
    }

    /// Parses the line-delimited JSON format (one group per line).
    pub fn parse(text: &str) -> Result<Self, CatalogError> {
        let mut groups = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let g: AttributeGroup = serde_json::from_str(line).map_err(|e| CatalogError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            groups.push(g);
        }
        Self::new(groups)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            out.push_str(&serde_json::to_string(g).expect("catalog group serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CatalogError> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    /// SHA-256 over the canonical serialization of the groups.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }

    pub fn groups(&self) -> &[AttributeGroup] {
        &self.groups
    }

    pub fn group(&self, g: usize) -> &AttributeGroup {
        &self.groups[g]
    }

    /// Number of groups, i.e. attribute tokens.
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_index(&self, key: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.key == key)
    }

    pub fn num_attributes(&self) -> usize {
        self.groups.iter().map(|g| g.attributes.len()).sum()
    }

    pub fn attributes(&self) -> impl Iterator<Item = AttrRef> + '_ {
        self.groups.iter().enumerate().flat_map(|(g, grp)| {
            (0..grp.attributes.len()).map(move |index| AttrRef { group: g, index })
        })
    }

    pub fn value(&self, a: AttrRef) -> &str {
        &self.groups[a.group].attributes[a.index]
    }

    pub fn label(&self, a: AttrRef) -> String {
        format!("{}:{}", self.groups[a.group].key, self.value(a))
    }

    pub fn prompt(&self, a: AttrRef) -> Prompt {
        render_prompt(&self.groups[a.group], self.value(a))
    }

    pub fn find(&self, group: &str, value: &str) -> Option<AttrRef> {
        let g = self.group_index(group)?;
        let index = self.groups[g].position(value)?;
        Some(AttrRef { group: g, index })
    }

    /// Resolves a `Group:value` label.
    pub fn resolve(&self, label: &str) -> Result<AttrRef, CatalogError> {
        let (group, value) = label
            .split_once(':')
            .ok_or_else(|| CatalogError::UnknownAttribute(label.to_string()))?;
        self.find(group.trim(), value.trim())
            .ok_or_else(|| CatalogError::UnknownAttribute(label.to_string()))
    }

    pub fn is_seen(&self, a: AttrRef) -> bool {
        !self.unseen.contains(&a)
    }

    pub fn seen(&self) -> Vec<AttrRef> {
        self.attributes().filter(|a| self.is_seen(*a)).collect()
    }

    pub fn unseen(&self) -> Vec<AttrRef> {
        self.unseen.iter().copied().collect()
    }

    pub fn seen_in_group(&self, g: usize) -> Vec<AttrRef> {
        (0..self.groups[g].attributes.len())
            .map(|index| AttrRef { group: g, index })
            .filter(|a| self.is_seen(*a))
            .collect()
    }

    /// Same catalog with `holdout` marked unseen.
    ///
    /// Every group must keep at least one seen attribute.
    pub fn with_holdout(&self, holdout: &[AttrRef]) -> Result<Self, CatalogError> {
        let mut unseen = BTreeSet::new();
        for &a in holdout {
            if a.group >= self.groups.len() || a.index >= self.groups[a.group].attributes.len() {
                return Err(CatalogError::Split(format!("holdout {a:?} is not in the catalog")));
            }
            unseen.insert(a);
        }
        for (g, grp) in self.groups.iter().enumerate() {
            let left = (0..grp.attributes.len())
                .filter(|&index| !unseen.contains(&AttrRef { group: g, index }))
                .count();
            if left == 0 {
                return Err(CatalogError::Split(format!(
                    "group `{}` has no seen attribute left",
                    grp.key
                )));
            }
        }
        Ok(Self {
            groups: self.groups.clone(),
            unseen,
        })
    }

    /// Like [`AttributeCatalog::with_holdout`] with `Group:value` labels.
    pub fn with_holdout_labels<S: AsRef<str>>(&self, labels: &[S]) -> Result<Self, CatalogError> {
        let refs = labels
            .iter()
            .map(|l| {
                self.resolve(l.as_ref())
                    .map_err(|_| CatalogError::Split(format!("unknown holdout `{}`", l.as_ref())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.with_holdout(&refs)
    }

    pub fn holdout_labels(&self) -> Vec<String> {
        self.unseen.iter().map(|&a| self.label(a)).collect()
    }
}

/// Seen and unseen attributes after holding out `holdout`.
pub fn split_attributes(
    catalog: &AttributeCatalog,
    holdout: &[AttrRef],
) -> Result<(Vec<AttrRef>, Vec<AttrRef>), CatalogError> {
    let split = catalog.with_holdout(holdout)?;
    Ok((split.seen(), split.unseen()))
}

pub fn load_catalog(path: &Path) -> Result<AttributeCatalog, CatalogError> {
    AttributeCatalog::parse(&fs::read_to_string(path)?)
}

fn validate(groups: &[AttributeGroup]) -> Result<(), CatalogError> {
    if groups.is_empty() {
        return Err(CatalogError::Validation("catalog has no groups".into()));
    }
    let mut keys = BTreeSet::new();
    for g in groups {
        if g.key.is_empty() || g.key.contains(':') {
            return Err(CatalogError::Validation(format!(
                "group key `{}` must be non-empty and contain no `:`",
                g.key
            )));
        }
        if !keys.insert(g.key.as_str()) {
            return Err(CatalogError::Validation(format!("duplicate group key `{}`", g.key)));
        }
        if g.template.matches(SLOT).count() != 1 {
            return Err(CatalogError::Validation(format!(
                "template of `{}` must contain exactly one `{SLOT}`",
                g.key
            )));
        }
        if g.attributes.is_empty() {
            return Err(CatalogError::Validation(format!("group `{}` is empty", g.key)));
        }
        let mut seen = BTreeSet::new();
        for a in &g.attributes {
            if a.trim().is_empty() {
                return Err(CatalogError::Validation(format!("empty attribute in `{}`", g.key)));
            }
            if !seen.insert(a.as_str()) {
                return Err(CatalogError::Validation(format!(
                    "attribute `{a}` listed twice in group `{}`",
                    g.key
                )));
            }
        }
        if let Some([lo, hi]) = g.region {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
                return Err(CatalogError::Validation(format!(
                    "region of `{}` must satisfy 0 <= lo < hi <= 1",
                    g.key
                )));
            }
        }
    }
    Ok(())
}

/// The eight PETA groups with their prompt templates.
pub fn peta_catalog() -> AttributeCatalog {
    AttributeCatalog::new(vec![
        AttributeGroup::new("Hair", "This person has {} hair.", &["long", "short"]),
        AttributeGroup::new("Gender", "This person is {}.", &["male", "female"]),
        AttributeGroup::new(
            "Age",
            "The age of this person is {} years old.",
            &["less15", "less30", "less45", "less60", "larger60"],
        ),
        AttributeGroup::new(
            "Carry",
            "This person is carrying {}.",
            &["backpack", "messengerbag", "plasticbags", "other", "nothing"],
        ),
        AttributeGroup::new(
            "Accessory",
            "This person is accessory {}.",
            &["sunglasses", "hat", "muffler", "nothing"],
        ),
        AttributeGroup::new(
            "Foot",
            "This person is wearing {} in foot.",
            &["leathershoes", "sandals", "sneaker", "shoes"],
        ),
        AttributeGroup::new(
            "Upperbody",
            "This person is wearing {} in upper body.",
            &[
                "casual", "formal", "jacket", "logo", "shortsleeve", "plaid", "stripe", "tshirt",
                "vneck", "other",
            ],
        ),
        AttributeGroup::new(
            "Lowerbody",
            "This person is wearing {} in lower body.",
            &["casual", "formal", "trousers", "shortskirt", "shorts", "plaid", "jeans"],
        ),
    ])
    .expect("built-in catalog is valid")
}

/// Desk-scale catalog for the synthetic dataset: PETA group keys and
/// templates, 3–5 attributes per group, with several attribute words shared
/// between groups so cross-group open-attribute transfer can be tested.
pub fn synthetic_catalog() -> AttributeCatalog {
    AttributeCatalog::new(vec![
        AttributeGroup::new(
            "Hair",
            "This person has {} hair.",
            &["long", "short", "black", "white", "brown"],
        ),
        AttributeGroup::new("Gender", "This person is {}.", &["male", "female", "unknown"]),
        AttributeGroup::new(
            "Age",
            "The age of this person is {} years old.",
            &["less15", "less30", "less45", "less60", "larger60"],
        ),
        AttributeGroup::new(
            "Carry",
            "This person is carrying {}.",
            &["backpack", "messengerbag", "plasticbags", "nothing"],
        ),
        AttributeGroup::new(
            "Accessory",
            "This person is accessory {}.",
            &["sunglasses", "hat", "muffler", "nothing"],
        ),
        AttributeGroup::new(
            "Foot",
            "This person is wearing {} in foot.",
            &["leathershoes", "sandals", "black", "white", "brown"],
        ),
        AttributeGroup::new(
            "Upperbody",
            "This person is wearing {} in upper body.",
            &["casual", "formal", "plaid", "striped", "red"],
        ),
        AttributeGroup::new(
            "Lowerbody",
            "This person is wearing {} in lower body.",
            &["jeans", "shorts", "plaid", "striped", "red"],
        ),
    ])
    .expect("built-in catalog is valid")
}

/// One held-out word per group whose value also appears, seen, in another
/// group of [`synthetic_catalog`].
pub const SYNTHETIC_TRANSFER_HOLDOUT: [&str; 5] = [
    "Hair:white",
    "Foot:black",
    "Accessory:nothing",
    "Upperbody:plaid",
    "Lowerbody:striped",
];

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn peta_catalog_has_eight_groups_and_39_attributes() {
        let c = peta_catalog();
        assert_eq!(c.num_groups(), 8);
        assert_eq!(c.num_attributes(), 39);
        let reparsed = AttributeCatalog::parse(&c.to_jsonl()).unwrap();
        assert_eq!(reparsed.num_groups(), 8);
    }

    #[test]
    fn minimal_catalog() {
        let c = AttributeCatalog::parse(r#"{"key":"Hair","template":"This person has {} hair.","attributes":["long"]}"#)
            .unwrap();
        assert_eq!(c.num_groups(), 1);
        assert_eq!(c.num_attributes(), 1);
    }

    #[test]
    fn validation_errors() {
        let dup_in_group = r#"{"key":"Hair","template":"{}","attributes":["long","long"]}"#;
        assert!(matches!(AttributeCatalog::parse(dup_in_group), Err(CatalogError::Validation(_))));
        let empty = r#"{"key":"Hair","template":"{}","attributes":[]}"#;
        assert!(matches!(AttributeCatalog::parse(empty), Err(CatalogError::Validation(_))));
        let dup_key = "{\"key\":\"A\",\"template\":\"{}\",\"attributes\":[\"x\"]}\n{\"key\":\"A\",\"template\":\"{}\",\"attributes\":[\"y\"]}";
        assert!(matches!(AttributeCatalog::parse(dup_key), Err(CatalogError::Validation(_))));
        let two_slots = r#"{"key":"A","template":"{} {}","attributes":["x"]}"#;
        assert!(matches!(AttributeCatalog::parse(two_slots), Err(CatalogError::Validation(_))));
        let bad_json = "{\"key\":\"A\",\"template\":\"{}\",\"attributes\":[\"x\"]}\nnot json";
        assert!(matches!(AttributeCatalog::parse(bad_json), Err(CatalogError::Parse { line: 2, .. })));
        let bad_region = r#"{"key":"A","template":"{}","attributes":["x"],"region":[0.5,0.5]}"#;
        assert!(matches!(AttributeCatalog::parse(bad_region), Err(CatalogError::Validation(_))));
    }

    #[test]
    fn prompts_follow_templates() {
        let c = peta_catalog();
        let hair = c.group(c.group_index("Hair").unwrap());
        assert_eq!(render_prompt(hair, "long").sentence, "This person has long hair.");
        let carry = c.group(c.group_index("Carry").unwrap());
        assert_eq!(render_prompt(carry, "backpack").sentence, "This person is carrying backpack.");
        let upper = c.group(c.group_index("Upperbody").unwrap());
        assert_eq!(
            render_prompt(upper, "cotton").sentence,
            "This person is wearing cotton in upper body."
        );
    }

    #[test]
    fn split_counts() {
        let c = synthetic_catalog();
        let (seen, unseen) = split_attributes(&c, &[]).unwrap();
        assert_eq!((seen.len(), unseen.len()), (c.num_attributes(), 0));

        // one attribute from each multi-attribute group
        let holdout: Vec<AttrRef> = (0..c.num_groups())
            .filter(|&g| c.group(g).attributes.len() > 1)
            .map(|g| AttrRef { group: g, index: 0 })
            .collect();
        let (seen, unseen) = split_attributes(&c, &holdout).unwrap();
        assert_eq!(unseen.len(), holdout.len());
        assert_eq!(seen.len(), c.num_attributes() - holdout.len());
    }

    #[test]
    fn split_errors() {
        let c = synthetic_catalog();
        assert!(matches!(
            c.with_holdout_labels(&["Nope:thing"]),
            Err(CatalogError::Split(_))
        ));
        let g = c.group_index("Gender").unwrap();
        let all: Vec<AttrRef> = (0..3).map(|index| AttrRef { group: g, index }).collect();
        assert!(matches!(c.with_holdout(&all), Err(CatalogError::Split(_))));
    }

    #[test]
    fn transfer_holdout_words_are_seen_elsewhere() {
        let c = synthetic_catalog().with_holdout_labels(&SYNTHETIC_TRANSFER_HOLDOUT).unwrap();
        for a in c.unseen() {
            let word = c.value(a);
            let elsewhere = c.seen().into_iter().any(|s| s.group != a.group && c.value(s) == word);
            assert!(elsewhere, "{} has no seen twin", c.label(a));
        }
    }

    #[test]
    fn save_load_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("catalog.jsonl");
        let mut groups = synthetic_catalog().groups().to_vec();
        groups[0].region = Some([0.0, 0.3]);
        let c = AttributeCatalog::new(groups).unwrap();
        c.save(&path).unwrap();
        let first = fs::read(&path).unwrap();
        let loaded = load_catalog(&path).unwrap();
        assert_eq!(loaded, c);
        loaded.save(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
        assert_eq!(loaded.hash(), c.hash());
    }

    proptest! {
        #[test]
        fn render_is_injective_per_group(a in "[a-z]{1,8}", b in "[a-z]{1,8}") {
            let c = peta_catalog();
            for g in c.groups() {
                let pa = render_prompt(g, &a);
                let pb = render_prompt(g, &b);
                prop_assert_eq!(pa.sentence == pb.sentence, a == b);
            }
        }

        #[test]
        fn split_partitions_attributes(mask in proptest::collection::vec(any::<bool>(), 36)) {
            let c = synthetic_catalog();
            let all: Vec<AttrRef> = c.attributes().collect();
            let holdout: Vec<AttrRef> = all.iter().zip(&mask).filter(|(_, m)| **m).map(|(a, _)| *a).collect();
            if let Ok((seen, unseen)) = split_attributes(&c, &holdout) {
                prop_assert_eq!(seen.len() + unseen.len(), c.num_attributes());
                let mut union: Vec<AttrRef> = seen.iter().chain(&unseen).copied().collect();
                union.sort();
                prop_assert_eq!(union, all);
            }
        }
    }
}
