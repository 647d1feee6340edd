use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use latprobe_core::archive::load_archive;
use latprobe_core::{AttackConfig, InjectionMask, Network, SigmaProfile};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::failure::Failure;

/// Campaign description read from `--config`. Relative paths are resolved
/// against the config file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub generator: PathBuf,
    pub classifiers: Vec<ClassifierEntry>,
    pub tuples: TupleSettings,
    #[serde(default)]
    pub labels: LabelSource,
    #[serde(default)]
    pub profile: Profile,
    /// Field-by-field overrides of the profile's attack settings.
    #[serde(default)]
    pub attack: Map<String, Value>,
    /// Named layer subsets as lists of injection ordinals.
    pub subsets: BTreeMap<String, Vec<usize>>,
    #[serde(default)]
    pub sigma: SigmaSettings,
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(default)]
    pub workers: Option<usize>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierEntry {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TupleSettings {
    pub count: usize,
    pub seed: u64,
}

/// Where a tuple's intended label comes from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// Drawn uniformly with the tuple (class-conditional generators).
    Sampled,
    /// The classifier's prediction on the unperturbed image.
    #[default]
    Predicted,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Imagenet,
    Mnist,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaSettings {
    pub samples: usize,
    pub seed: u64,
    pub floor: f32,
}

impl Default for SigmaSettings {
    fn default() -> Self {
        SigmaSettings {
            samples: latprobe_core::sigma::DEFAULT_SAMPLES,
            seed: 0,
            floor: latprobe_core::sigma::DEFAULT_FLOOR,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Campaign {
    pub config: CampaignConfig,
    pub base: PathBuf,
}

impl Campaign {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
        let config: CampaignConfig =
            serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Campaign { config, base })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn generator_path(&self) -> PathBuf {
        self.resolve(&self.config.generator)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.config.out)
    }

    pub fn records_path(&self) -> PathBuf {
        self.out_dir().join("records.jsonl")
    }

    pub fn attack_config(&self) -> Result<AttackConfig, Failure> {
        let base = match self.config.profile {
            Profile::Imagenet => AttackConfig::imagenet(),
            Profile::Mnist => AttackConfig::mnist(),
        };
        let mut value = serde_json::to_value(base).expect("config serializes");
        let obj = value.as_object_mut().expect("config is an object");
        for (k, v) in &self.config.attack {
            if !obj.contains_key(k) && k != "max_bound" {
                return Err(Failure::usage(format!("unknown attack setting `{k}`")));
            }
            obj.insert(k.clone(), v.clone());
        }
        let config: AttackConfig = serde_json::from_value(value).map_err(|e| Failure::usage(format!("attack settings: {e}")))?;
        config.validate().map_err(|e| Failure::usage(e.to_string()))?;
        Ok(config)
    }
}

fn file_digest(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// A campaign with its archives loaded and checked against each other.
pub struct Prepared {
    pub campaign: Campaign,
    pub generator: Network,
    pub sigma: SigmaProfile,
    pub classifiers: Vec<(String, Network)>,
    pub masks: Vec<(String, InjectionMask)>,
    pub attack: AttackConfig,
    pub hash: String,
}

impl Prepared {
    pub fn open(campaign: Campaign) -> Result<Self, Failure> {
        let cfg = &campaign.config;
        let attack = campaign.attack_config()?;
        let gen_path = campaign.generator_path();
        let archive = load_archive(&gen_path).map_err(|e| Failure::usage(format!("{}: {e}", gen_path.display())))?;
        let generator = archive.network;
        let sigma = archive.sigma.ok_or_else(|| {
            Failure::usage(format!("{} has no sigma profile; run `latprobe calibrate` first", gen_path.display()))
        })?;
        sigma.check_against(&generator).map_err(|e| Failure::usage(e.to_string()))?;
        let image_shape = generator.spec().output_shape().map_err(|e| Failure::usage(e.to_string()))?;

        if cfg.classifiers.is_empty() {
            return Err(Failure::usage("no classifiers configured"));
        }
        let mut classifiers = Vec::new();
        let mut digests = Vec::new();
        for entry in &cfg.classifiers {
            let path = campaign.resolve(&entry.path);
            let net = load_archive(&path)
                .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
                .network;
            if net.spec().input_shape != image_shape {
                return Err(Failure::usage(format!(
                    "classifier `{}` expects input {:?} but the generator produces {:?}",
                    entry.name,
                    net.spec().input_shape,
                    image_shape
                )));
            }
            if net.spec().class_count.unwrap_or(0) < 2 {
                return Err(Failure::usage(format!("classifier `{}` needs at least two classes", entry.name)));
            }
            digests.push((entry.name.clone(), file_digest(&path)?));
            classifiers.push((entry.name.clone(), net));
        }
        let mut names: Vec<&str> = classifiers.iter().map(|(n, _)| n.as_str()).collect();
        names.sort();
        names.dedup();
        if names.len() != classifiers.len() {
            return Err(Failure::usage("classifier names must be unique"));
        }

        let points = generator.spec().injection_points.len();
        if cfg.subsets.is_empty() {
            return Err(Failure::usage("no layer subsets configured"));
        }
        let mut masks = Vec::new();
        for (name, ordinals) in &cfg.subsets {
            let mut flags = vec![false; points];
            for &o in ordinals {
                if o >= points {
                    return Err(Failure::usage(format!(
                        "subset `{name}` uses injection point {o}, generator has {points}"
                    )));
                }
                flags[o] = true;
            }
            if ordinals.is_empty() {
                return Err(Failure::usage(format!("subset `{name}` is empty")));
            }
            masks.push((name.clone(), InjectionMask::from_flags(flags)));
        }

        let hash_input = serde_json::json!({
            "attack": attack,
            "tuple_seed": cfg.tuples.seed,
            "labels": cfg.labels,
            "subsets": cfg.subsets,
            "generator": file_digest(&gen_path)?,
            "classifiers": digests,
        });
        let hash = hex::encode(&Sha256::digest(hash_input.to_string().as_bytes())[..8]);

        Ok(Prepared {
            campaign,
            generator,
            sigma,
            classifiers,
            masks,
            attack,
            hash,
        })
    }

    pub fn class_count(&self) -> usize {
        self.classifiers
            .iter()
            .map(|(_, c)| c.spec().class_count.unwrap_or(0))
            .min()
            .unwrap_or(0)
    }

    pub fn label_name(&self, label: usize) -> String {
        self.campaign
            .config
            .class_names
            .get(label)
            .cloned()
            .unwrap_or_else(|| label.to_string())
    }
}
