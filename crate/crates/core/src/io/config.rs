//! Training run configuration (TOML, or JSON) and architecture presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{two_band_dataset, Dataset};
use crate::error::{QnnError, Result};
use crate::fixedpoint::QFormat;
use crate::linear::Padding;
use crate::train::{ArchSpec, FormatSpec, LayerSpec, TrainConfig};

fn conv(filters: usize, kernel: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv {
        filters,
        kernel,
        stride,
        padding: Padding::Same,
    }
}

fn dense(units: usize) -> LayerSpec {
    LayerSpec::Dense { units }
}

/// Named layer stacks.
pub fn arch_preset(name: &str) -> Option<Vec<LayerSpec>> {
    use LayerSpec::Flatten;
    Some(match name {
        "mnist-arch" => vec![
            conv(64, 5, 2),
            conv(128, 3, 1),
            conv(256, 3, 1),
            conv(384, 3, 1),
            conv(512, 3, 2),
            Flatten,
            dense(128),
            dense(10),
        ],
        "fashion-arch" | "cifar-arch" => vec![
            conv(64, 5, 2),
            conv(96, 3, 1),
            conv(128, 3, 2),
            Flatten,
            dense(128),
            dense(10),
        ],
        "small-conv" => vec![conv(8, 5, 2), conv(16, 3, 2), Flatten, dense(64), dense(10)],
        "tiny-dense" => vec![dense(16), dense(2)],
        _ => return None,
    })
}

/// Named number-format sets.
pub fn format_preset(name: &str) -> Option<FormatSpec> {
    let act = match name {
        "mnist-formats" => QFormat::unsigned(3, 5),
        "fashion-formats" | "cifar-formats" => QFormat::unsigned(4, 4),
        _ => return None,
    };
    Some(FormatSpec {
        weights: QFormat::signed(2, 6),
        biases: QFormat::signed(5, 3),
        activations: act,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Keep only the first `limit` samples.
        #[serde(default)]
        limit: Option<usize>,
    },
    TwoBand {
        samples: usize,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Preset name; ignored when `layers` is given.
    pub arch: String,
    pub layers: Option<Vec<LayerSpec>>,
    /// Preset name; individual formats below override it.
    pub formats: String,
    pub weights: Option<String>,
    pub biases: Option<String>,
    pub activations: Option<String>,
    /// Input format; pixel bytes map to raws of this format.
    pub input: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: "small-conv".into(),
            layers: None,
            formats: "mnist-formats".into(),
            weights: None,
            biases: None,
            activations: None,
            input: "UQ0.8".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub model: PathBuf,
    pub metrics: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            model: "model.json".into(),
            metrics: "metrics.csv".into(),
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn parse_format(field: &str, s: &str) -> Result<QFormat> {
    s.parse()
        .map_err(|e: QnnError| QnnError::Config(format!("{field}: {e}")))
}

impl RunConfig {
    /// Parses TOML, falling back to JSON for `.json` files or `{`-prefixed
    /// text, then validates and resolves relative paths against `base`.
    pub fn parse(text: &str, json: bool, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = if json || text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| QnnError::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| QnnError::Config(e.to_string()))?
        };
        cfg.train
            .validate()
            .map_err(|e| QnnError::Config(format!("train.{}", e.to_string().trim_start_matches("config: "))))?;
        cfg.arch_formats()?;
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataConfig::Idx { images, labels, .. } = &mut cfg.data {
            join(images);
            join(labels);
        }
        join(&mut cfg.output.model);
        join(&mut cfg.output.metrics);
        if let Some(c) = &mut cfg.output.checkpoint {
            join(c);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = super::read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|e| QnnError::Config(format!("{}: {e}", path.display())))?;
        let json = path.extension().is_some_and(|e| e == "json");
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, json, base)
    }

    fn arch_formats(&self) -> Result<(Vec<LayerSpec>, FormatSpec, QFormat)> {
        let m = &self.model;
        let layers = match &m.layers {
            Some(l) => l.clone(),
            None => arch_preset(&m.arch)
                .ok_or_else(|| QnnError::Config(format!("model.arch: unknown preset {:?}", m.arch)))?,
        };
        let mut formats = format_preset(&m.formats)
            .ok_or_else(|| QnnError::Config(format!("model.formats: unknown preset {:?}", m.formats)))?;
        if let Some(s) = &m.weights {
            formats.weights = parse_format("model.weights", s)?;
        }
        if let Some(s) = &m.biases {
            formats.biases = parse_format("model.biases", s)?;
        }
        if let Some(s) = &m.activations {
            formats.activations = parse_format("model.activations", s)?;
        }
        let input = parse_format("model.input", &m.input)?;
        Ok((layers, formats, input))
    }

    pub fn input_format(&self) -> Result<QFormat> {
        Ok(self.arch_formats()?.2)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let input = self.input_format()?;
        match &self.data {
            DataConfig::Idx {
                images,
                labels,
                limit,
            } => {
                let d = super::idx::load_idx(images, labels, input)?;
                Ok(match limit {
                    Some(n) => d.take(*n),
                    None => d,
                })
            }
            DataConfig::TwoBand { samples, seed } => {
                let d = two_band_dataset(*samples, *seed);
                if d.input_format != input {
                    return Err(QnnError::Config(format!(
                        "model.input: two_band data uses {}, got {input}",
                        d.input_format
                    )));
                }
                Ok(d)
            }
        }
    }

    /// Architecture for inputs shaped like `data`.
    pub fn arch(&self, data: &Dataset) -> Result<ArchSpec> {
        let (layers, formats, input_format) = self.arch_formats()?;
        Ok(ArchSpec {
            input_shape: data.input_shape.clone(),
            input_format,
            layers,
            formats,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let f = arch_preset("fashion-arch").unwrap();
        assert_eq!(f[0], conv(64, 5, 2));
        assert_eq!(f[1], conv(96, 3, 1));
        assert_eq!(f[2], conv(128, 3, 2));
        assert_eq!(f[3], LayerSpec::Flatten);
        assert_eq!(&f[4..], &[dense(128), dense(10)]);
        assert_eq!(arch_preset("mnist-arch").unwrap().len(), 8);
        let m = format_preset("mnist-formats").unwrap();
        assert_eq!(m.activations.to_string(), "UQ3.5");
        assert_eq!(m.biases.to_string(), "Q5.3");
        assert_eq!(m.weights.to_string(), "Q2.6");
        assert_eq!(format_preset("fashion-formats").unwrap().activations.to_string(), "UQ4.4");
    }

    #[test]
    fn parses_toml_and_json() {
        let text = r#"
            [data]
            source = "idx"
            images = "imgs"
            labels = "/abs/labels"
            limit = 100

            [model]
            arch = "fashion-arch"
            formats = "fashion-formats"

            [train]
            learning_rate = 0.001
            total_steps = 50

            [output]
            model = "out/m.json"
        "#;
        let c = RunConfig::parse(text, false, Path::new("/base")).unwrap();
        assert_eq!(c.train.learning_rate, 0.001);
        assert_eq!(c.train.batch_size, 512);
        assert_eq!(c.output.model, PathBuf::from("/base/out/m.json"));
        match &c.data {
            DataConfig::Idx { images, labels, limit } => {
                assert_eq!(images, &PathBuf::from("/base/imgs"));
                assert_eq!(labels, &PathBuf::from("/abs/labels"));
                assert_eq!(*limit, Some(100));
            }
            d => panic!("{d:?}"),
        }
        let j = r#"{"data": {"source": "two_band", "samples": 10},
                    "model": {"layers": [{"type": "dense", "units": 2}]}}"#;
        let c = RunConfig::parse(j, true, Path::new(".")).unwrap();
        let d = c.load_dataset().unwrap();
        assert_eq!(c.arch(&d).unwrap().layers, vec![dense(2)]);
    }

    #[test]
    fn reports_field_paths() {
        let bad_lr = "[data]\nsource = \"two_band\"\nsamples = 4\n[train]\nlearning_rate = -1.0\n";
        let e = RunConfig::parse(bad_lr, false, Path::new(".")).unwrap_err().to_string();
        assert!(e.contains("train.learning_rate"), "{e}");
        let unknown = "[data]\nsource = \"two_band\"\nsamples = 4\n[train]\nlr = 1.0\n";
        let e = RunConfig::parse(unknown, false, Path::new(".")).unwrap_err().to_string();
        assert!(e.contains("lr"), "{e}");
        let preset = "[data]\nsource = \"two_band\"\nsamples = 4\n[model]\narch = \"nope\"\n";
        let e = RunConfig::parse(preset, false, Path::new(".")).unwrap_err().to_string();
        assert!(e.contains("model.arch"), "{e}");
    }
}
