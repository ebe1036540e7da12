//! Shipped experiment presets. The files live in `presets/` at the
//! repository root and are compiled in.

use crate::config::ConfigLoader;
use crate::error::{HarnessError, Result};

pub const PRESETS: &[(&str, &str)] = &[
    ("desk-accept", include_str!("../../../presets/desk-accept.cfg")),
    ("fig5a-desk", include_str!("../../../presets/fig5a-desk.cfg")),
    ("fig5b-desk", include_str!("../../../presets/fig5b-desk.cfg")),
    ("fig6a-desk", include_str!("../../../presets/fig6a-desk.cfg")),
    ("fig6b-desk", include_str!("../../../presets/fig6b-desk.cfg")),
];

pub fn preset_text(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            HarnessError::Config(format!("unknown preset `{name}` (available: {})", names.join(", ")))
        })
}

/// A loader seeded with a preset's settings.
pub fn preset_loader(name: &str) -> Result<ConfigLoader> {
    let mut l = ConfigLoader::new();
    l.text(preset_text(name)?, &format!("preset {name}"))?;
    Ok(l)
}
