//! Flat key-value run configuration files.
//!
//! One `key = value` pair per line; `#` starts a comment. Unknown keys
//! are errors. Keys cover the model, training, and synthetic-data
//! settings plus optional on-disk dataset paths; anything omitted takes
//! the desk-scale default. See the README for the full key table.

use std::collections::BTreeSet;
use std::path::Path;

use crate::data::SyntheticConfig;
use crate::gal::PriorGroup;
use crate::model::{ConvBlockSpec, ModelConfig, Variant};
use crate::train::{LrSchedule, TrainConfig};
use crate::{Error, Result};

/// Everything a run needs: model structure, training settings, and the
/// data source (on-disk pair when given, synthetic otherwise).
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
    pub data_images: Option<String>,
    pub data_annotations: Option<String>,
}

pub fn parse_file(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_str(&text)
}

pub fn parse_str(text: &str) -> Result<RunConfig> {
    let mut pairs: Vec<(usize, String, String)> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 'key = value', got '{line}'"),
            });
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !seen.insert(key.clone()) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("duplicate key '{key}'"),
            });
        }
        pairs.push((line_no, key, value));
    }

    let mut variant = Variant::Baseline;
    // first pass: variant shapes several defaults
    for (line, key, value) in &pairs {
        if key == "variant" {
            variant = value.parse().map_err(|e| at_line(*line, e))?;
        }
    }

    let mut model = ModelConfig::desk_default(8, variant);
    let mut train = TrainConfig::desk_default(variant);
    let mut synthetic = SyntheticConfig::default();
    let mut data_images = None;
    let mut data_annotations = None;
    let mut m_set = false;
    let mut factor_map_set = false;
    let mut weight_decay_set = false;

    for (line, key, value) in &pairs {
        let line = *line;
        match key.as_str() {
            "variant" => {} // handled above
            "m" => {
                model.m = parse_num(line, key, value)?;
                m_set = true;
            }
            "input_h" => model.input.0 = parse_num(line, key, value)?,
            "input_w" => model.input.1 = parse_num(line, key, value)?,
            "input_c" => model.input.2 = parse_num(line, key, value)?,
            "backbone" => model.backbone = parse_backbone(line, value)?,
            "branch_channels" => model.branch_channels = parse_num(line, key, value)?,
            "projection_channels" => model.projection_channels = parse_num(line, key, value)?,
            "prior_groups" => model.prior_groups = Some(parse_prior_groups(line, value)?),
            "affinity_scale" => model.affinity_scale = parse_bool(line, key, value)?,
            "batch_size" => train.batch_size = parse_num(line, key, value)?,
            "max_steps" => train.max_steps = parse_num(line, key, value)?,
            "lr_schedule" => train.lr_schedule = parse_schedule(line, value)?,
            "weight_decay" => {
                train.weight_decay = parse_num(line, key, value)?;
                weight_decay_set = true;
            }
            "seed" => {
                let s: u64 = parse_num(line, key, value)?;
                train.seed = s;
                synthetic.seed = s;
            }
            "eval_every" => train.eval_every = parse_num(line, key, value)?,
            "check_isolation" => train.check_isolation = parse_bool(line, key, value)?,
            "k" => synthetic.k = parse_num(line, key, value)?,
            "factor_map" => {
                synthetic.factor_map = parse_list(line, key, value)?;
                factor_map_set = true;
            }
            "label_noise" => synthetic.label_noise = parse_num(line, key, value)?,
            "n_train" => synthetic.n_train = parse_num(line, key, value)?,
            "n_eval" => synthetic.n_eval = parse_num(line, key, value)?,
            "render_contrast" => synthetic.render_contrast = parse_num(line, key, value)?,
            "data_images" => data_images = Some(value.clone()),
            "data_annotations" => data_annotations = Some(value.clone()),
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown key '{other}'"),
                })
            }
        }
    }

    // keep dependent defaults coherent
    synthetic.m = model.m;
    synthetic.image = (model.input.0, model.input.1);
    if m_set && !factor_map_set {
        // spread factors evenly over attributes
        synthetic.factor_map = (0..model.m).map(|j| j * synthetic.k / model.m).collect();
    }
    if !weight_decay_set {
        train.weight_decay = if variant == Variant::Baseline { 0.0005 } else { 0.001 };
    }
    train.variant = variant;
    model.variant = variant;

    Ok(RunConfig {
        model,
        train,
        synthetic,
        data_images,
        data_annotations,
    })
}

fn at_line(line: usize, e: Error) -> Error {
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("{key}: invalid number '{value}'"),
    })
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Parse {
            line,
            msg: format!("{key}: expected true/false, got '{other}'"),
        }),
    }
}

fn parse_list(line: usize, key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|t| {
            t.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("{key}: invalid entry '{}'", t.trim()),
            })
        })
        .collect()
}

// "16,32,64" with per-block overrides "channels:kernel:stride[:p]"
fn parse_backbone(line: usize, value: &str) -> Result<Vec<ConvBlockSpec>> {
    let mut blocks = Vec::new();
    for part in value.split(',') {
        let part = part.trim();
        let fields: Vec<&str> = part.split(':').collect();
        let channels: usize = fields[0].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("backbone: invalid channel count '{}'", fields[0]),
        })?;
        let mut spec = ConvBlockSpec::plain(channels);
        if fields.len() > 1 {
            spec.kernel = fields[1].parse().map_err(|_| Error::Parse {
                line,
                msg: format!("backbone: invalid kernel '{}'", fields[1]),
            })?;
        }
        if fields.len() > 2 {
            spec.stride = fields[2].parse().map_err(|_| Error::Parse {
                line,
                msg: format!("backbone: invalid stride '{}'", fields[2]),
            })?;
        }
        if fields.len() > 3 {
            spec.pool = match fields[3] {
                "p" | "pool" => true,
                "n" | "nopool" => false,
                other => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("backbone: expected p|n, got '{other}'"),
                    })
                }
            };
        }
        if fields.len() > 4 {
            return Err(Error::Parse {
                line,
                msg: format!("backbone: too many fields in '{part}'"),
            });
        }
        blocks.push(spec);
    }
    Ok(blocks)
}

// "poly:initial,power,end" or "cyclical:min,max,stepsize"
fn parse_schedule(line: usize, value: &str) -> Result<LrSchedule> {
    let bad = |msg: String| Error::Parse { line, msg };
    let (kind, rest) = value
        .split_once(':')
        .ok_or_else(|| bad(format!("lr_schedule: expected 'poly:...' or 'cyclical:...', got '{value}'")))?;
    let nums: Vec<&str> = rest.split(',').map(str::trim).collect();
    match kind {
        "poly" => {
            if nums.len() != 3 {
                return Err(bad("lr_schedule: poly takes initial,power,end".into()));
            }
            Ok(LrSchedule::Poly {
                initial: nums[0].parse().map_err(|_| bad(format!("lr_schedule: bad initial '{}'", nums[0])))?,
                power: nums[1].parse().map_err(|_| bad(format!("lr_schedule: bad power '{}'", nums[1])))?,
                end: nums[2].parse().map_err(|_| bad(format!("lr_schedule: bad end '{}'", nums[2])))?,
            })
        }
        "cyclical" => {
            if nums.len() != 3 {
                return Err(bad("lr_schedule: cyclical takes min,max,stepsize".into()));
            }
            Ok(LrSchedule::Cyclical {
                min_lr: nums[0].parse().map_err(|_| bad(format!("lr_schedule: bad min '{}'", nums[0])))?,
                max_lr: nums[1].parse().map_err(|_| bad(format!("lr_schedule: bad max '{}'", nums[1])))?,
                stepsize: nums[2].parse().map_err(|_| bad(format!("lr_schedule: bad stepsize '{}'", nums[2])))?,
            })
        }
        other => Err(bad(format!("lr_schedule: unknown kind '{other}'"))),
    }
}

// "name:0,1;name2:2,3"
fn parse_prior_groups(line: usize, value: &str) -> Result<Vec<PriorGroup>> {
    let mut groups = Vec::new();
    for part in value.split(';') {
        let part = part.trim();
        let (name, members) = part.split_once(':').ok_or_else(|| Error::Parse {
            line,
            msg: format!("prior_groups: expected 'name:i,j', got '{part}'"),
        })?;
        groups.push(PriorGroup {
            name: name.trim().to_string(),
            members: parse_list(line, "prior_groups", members)?,
        });
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_desk_defaults() {
        let cfg = parse_str("").unwrap();
        assert_eq!(cfg.model.m, 8);
        assert_eq!(cfg.model.input, (32, 32, 1));
        assert_eq!(cfg.model.backbone.len(), 3);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.train.weight_decay, 0.0005);
        assert_eq!(cfg.synthetic.m, 8);
        assert!(cfg.data_images.is_none());
    }

    #[test]
    fn variant_switches_weight_decay_default() {
        let cfg = parse_str("variant = gal-j\n").unwrap();
        assert_eq!(cfg.train.weight_decay, 0.001);
        assert_eq!(cfg.model.variant, Variant::GalJ);
        let cfg = parse_str("variant = gal-j\nweight_decay = 0.01\n").unwrap();
        assert_eq!(cfg.train.weight_decay, 0.01);
    }

    #[test]
    fn full_config_round_trip() {
        let text = "\
# run settings
variant = gal-p
m = 4
input_h = 16
input_w = 16
backbone = 8,16:3:1:n
branch_channels = 8
projection_channels = 4
prior_groups = left:0,1; right:2,3
batch_size = 4
max_steps = 10
lr_schedule = cyclical:0,0.005,5000
seed = 9
k = 2
factor_map = 0,0,1,1
label_noise = 0.2
n_train = 64
n_eval = 16
";
        let cfg = parse_str(text).unwrap();
        assert_eq!(cfg.model.m, 4);
        assert_eq!(cfg.model.input, (16, 16, 1));
        assert!(!cfg.model.backbone[1].pool);
        assert_eq!(cfg.model.prior_groups.as_ref().unwrap().len(), 2);
        assert_eq!(
            cfg.train.lr_schedule,
            LrSchedule::Cyclical {
                min_lr: 0.0,
                max_lr: 0.005,
                stepsize: 5000
            }
        );
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.synthetic.seed, 9);
        assert_eq!(cfg.synthetic.image, (16, 16));
        assert_eq!(cfg.synthetic.factor_map, vec![0, 0, 1, 1]);
        assert_eq!(cfg.synthetic.label_noise, 0.2);
    }

    #[test]
    fn unknown_key_is_a_parse_error_with_line() {
        match parse_str("m = 8\nbogus = 1\n").err() {
            Some(Error::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("bogus"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_key_rejected() {
        assert!(matches!(
            parse_str("m = 8\nm = 9\n").err(),
            Some(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn malformed_line_rejected() {
        assert!(matches!(
            parse_str("just words\n").err(),
            Some(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn changing_m_respreads_default_factor_map() {
        let cfg = parse_str("m = 6\nk = 3\n").unwrap();
        assert_eq!(cfg.synthetic.factor_map, vec![0, 0, 1, 1, 2, 2]);
        assert_eq!(cfg.synthetic.m, 6);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = parse_str("\n# whole-line comment\nm = 4  # trailing comment\n\n").unwrap();
        assert_eq!(cfg.model.m, 4);
    }
}
