use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExtractorConfig;
use crate::kinematics::KINEMATIC_NAMES;

pub const VECTOR_LEN: usize = 72;
pub const SEQUENCE_LEN: usize = 37;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Acoustic,
    Kinect,
    Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowTag {
    Pre,
    Post,
    #[serde(rename = "n/a")]
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    Speaker,
    Others,
    #[serde(rename = "n/a")]
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub family: Family,
    pub window: WindowTag,
    pub role: RoleTag,
    /// Name without the window suffix; shared by a vector entry and the
    /// sequence dimension measuring the same quantity.
    pub base: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub entries: Vec<ManifestEntry>,
}

fn entry(base: String, family: Family, window: WindowTag, role: RoleTag) -> ManifestEntry {
    let name = match window {
        WindowTag::Pre => format!("{base}_pre"),
        WindowTag::Post => format!("{base}_post"),
        WindowTag::None => base.clone(),
    };
    ManifestEntry {
        name,
        family,
        window,
        role,
        base,
    }
}

const STATS: [&str; 4] = ["mean", "max", "min", "std"];

impl FeatureManifest {
    /// Layout of the aggregated vector.
    pub fn vector() -> Self {
        let mut e = Vec::with_capacity(VECTOR_LEN);
        for w in [WindowTag::Pre, WindowTag::Post] {
            for s in STATS {
                e.push(entry(format!("energy_{s}"), Family::Acoustic, w, RoleTag::Speaker));
            }
        }
        for s in STATS {
            e.push(entry(format!("pitch_{s}"), Family::Acoustic, WindowTag::Pre, RoleTag::Speaker));
        }
        for q in ["jitter", "shimmer", "hnr"] {
            e.push(entry(q.into(), Family::Acoustic, WindowTag::Pre, RoleTag::Speaker));
        }
        for (role, prefix) in [(RoleTag::Speaker, "speaker"), (RoleTag::Others, "others")] {
            for w in [WindowTag::Pre, WindowTag::Post] {
                for k in KINEMATIC_NAMES {
                    e.push(entry(format!("{prefix}_{k}"), Family::Kinect, w, role));
                }
            }
        }
        e.push(entry("duration".into(), Family::Duration, WindowTag::None, RoleTag::None));
        Self { entries: e }
    }

    /// Layout of one sequence step.
    pub fn sequence() -> Self {
        let mut e = Vec::with_capacity(SEQUENCE_LEN);
        let ac = |b: &str| entry(b.into(), Family::Acoustic, WindowTag::None, RoleTag::Speaker);
        for s in STATS {
            e.push(ac(&format!("energy_{s}")));
        }
        for b in ["pitch_mean", "pitch_std", "jitter", "shimmer", "hnr"] {
            e.push(ac(b));
        }
        for (role, prefix) in [(RoleTag::Speaker, "speaker"), (RoleTag::Others, "others")] {
            for k in KINEMATIC_NAMES {
                e.push(entry(format!("{prefix}_{k}"), Family::Kinect, WindowTag::None, role));
            }
        }
        Self { entries: e }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn family_indices(&self, family: Family) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.entries[i].family == family).collect()
    }

    /// Indices of post-window energy entries.
    pub fn post_energy_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.entries[i].window == WindowTag::Post && self.entries[i].base.starts_with("energy_"))
            .collect()
    }

    /// Sequence dimensions measuring the same quantities as the given vector entries.
    pub fn sequence_dims_for(&self, vector_indices: &[usize]) -> Vec<usize> {
        let seq = Self::sequence();
        let bases: Vec<&str> = vector_indices.iter().map(|&i| self.entries[i].base.as_str()).collect();
        (0..seq.len()).filter(|&j| bases.contains(&seq.entries[j].base.as_str())).collect()
    }
}

/// Hash of both layouts and the extractor settings.
pub fn manifest_hash(cfg: &ExtractorConfig) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&FeatureManifest::vector()).expect("manifest serializes"));
    h.update(serde_json::to_vec(&FeatureManifest::sequence()).expect("manifest serializes"));
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn layouts_have_fixed_sizes_and_unique_names() {
        for (m, n) in [(FeatureManifest::vector(), VECTOR_LEN), (FeatureManifest::sequence(), SEQUENCE_LEN)] {
            assert_eq!(m.len(), n);
            let names: HashSet<&str> = m.names().into_iter().collect();
            assert_eq!(names.len(), n);
        }
        let v = FeatureManifest::vector();
        assert_eq!(v.family_indices(Family::Acoustic).len(), 15);
        assert_eq!(v.family_indices(Family::Kinect).len(), 56);
        assert_eq!(v.index_of("duration"), Some(71));
        assert_eq!(v.index_of("energy_max_pre"), Some(1));
        assert_eq!(v.index_of("speaker_head_dir_pre"), Some(15 + 12));
        assert_eq!(v.post_energy_indices(), vec![4, 5, 6, 7]);
    }

    #[test]
    fn sequence_dims_follow_bases() {
        let v = FeatureManifest::vector();
        let dims = v.sequence_dims_for(&[v.index_of("pitch_mean_pre").unwrap(), v.index_of("others_head_dir_post").unwrap(), 71]);
        let s = FeatureManifest::sequence();
        let names: Vec<&str> = dims.iter().map(|&j| s.entries[j].name.as_str()).collect();
        assert_eq!(names, ["pitch_mean", "others_head_dir"]);
    }

    #[test]
    fn hash_depends_on_config() {
        let a = manifest_hash(&ExtractorConfig::default());
        let mut cfg = ExtractorConfig::default();
        cfg.vad.threshold_db = 12.0;
        assert_ne!(a, manifest_hash(&cfg));
        assert_eq!(a, manifest_hash(&ExtractorConfig::default()));
    }
}
