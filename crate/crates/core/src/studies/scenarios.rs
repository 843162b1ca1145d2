use crate::config::{Scenario, ScenarioFile};
use crate::error::{Error, Result};

/// Scenario files shipped with the library, in catalog order.
pub const CATALOG_FILES: [(&str, &str); 9] = [
    ("s1", include_str!("../../scenarios/s1.json")),
    ("s2", include_str!("../../scenarios/s2.json")),
    ("s3", include_str!("../../scenarios/s3.json")),
    ("sm1", include_str!("../../scenarios/sm1.json")),
    ("sm2", include_str!("../../scenarios/sm2.json")),
    ("sm3", include_str!("../../scenarios/sm3.json")),
    ("m1", include_str!("../../scenarios/m1.json")),
    ("m2", include_str!("../../scenarios/m2.json")),
    ("m3", include_str!("../../scenarios/m3.json")),
];

/// The raw file of a catalog scenario.
pub fn scenario_file(name: &str) -> Result<ScenarioFile> {
    let (_, text) = CATALOG_FILES
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .ok_or_else(|| Error::Config(format!("no scenario named `{name}`")))?;
    ScenarioFile::from_json(text)
}

pub fn scenario(name: &str) -> Result<Scenario> {
    scenario_file(name)?.build()
}

pub fn scenario_catalog() -> Vec<Scenario> {
    CATALOG_FILES
        .iter()
        .map(|(name, _)| scenario(name).expect("catalog scenarios are valid"))
        .collect()
}
