//! Model specifications and their canonical string form.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const CANONICAL_PREFIX: &str = "linpath-model/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn element_size(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Precision::F32),
            1 => Some(Precision::F64),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Precision::F32),
            "f64" => Some(Precision::F64),
            _ => None,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Shape of one input example. Images are stored channel-major (C, H, W).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InputShape {
    Flat(usize),
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
}

impl InputShape {
    pub fn image(height: usize, width: usize, channels: usize) -> Self {
        InputShape::Image {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        match *self {
            InputShape::Flat(d) => d,
            InputShape::Image {
                height,
                width,
                channels,
            } => height * width * channels,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        match *self {
            InputShape::Flat(_) => 1,
            InputShape::Image { channels, .. } => channels,
        }
    }

    fn canonical(&self) -> String {
        match *self {
            InputShape::Flat(d) => format!("flat:{d}"),
            InputShape::Image {
                height,
                width,
                channels,
            } => format!("{height}x{width}x{channels}"),
        }
    }

    fn parse(s: &str) -> Option<Self> {
        if let Some(d) = s.strip_prefix("flat:") {
            return d.parse().ok().map(InputShape::Flat);
        }
        let dims: Vec<usize> = s
            .split('x')
            .map(|p| p.parse().ok())
            .collect::<Option<_>>()?;
        match dims[..] {
            [h, w, c] => Some(InputShape::image(h, w, c)),
            _ => None,
        }
    }
}

impl fmt::Display for InputShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// Fully-connected ReLU network with the given hidden widths.
    Mlp { hidden: Vec<usize> },
    /// Conv stem, residual stages, global average pool, linear head.
    ResnetMini {
        widths: Vec<usize>,
        blocks_per_stage: usize,
        batch_norm: bool,
    },
}

impl Architecture {
    pub fn kind(&self) -> &'static str {
        match self {
            Architecture::Mlp { .. } => "mlp",
            Architecture::ResnetMini { .. } => "resnet-mini",
        }
    }

    pub fn resnet_mini_default(batch_norm: bool) -> Self {
        Architecture::ResnetMini {
            widths: vec![8, 16, 32],
            blocks_per_stage: 2,
            batch_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub input: InputShape,
    pub classes: usize,
    pub precision: Precision,
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_list(s: &str) -> Option<Vec<usize>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|p| p.parse().ok()).collect()
}

impl ModelSpec {
    pub fn mlp(input: InputShape, hidden: &[usize], classes: usize) -> Self {
        ModelSpec {
            arch: Architecture::Mlp {
                hidden: hidden.to_vec(),
            },
            input,
            classes,
            precision: Precision::F32,
        }
    }

    pub fn resnet_mini(input: InputShape, classes: usize, batch_norm: bool) -> Self {
        ModelSpec {
            arch: Architecture::resnet_mini_default(batch_norm),
            input,
            classes,
            precision: Precision::F32,
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn has_batch_norm(&self) -> bool {
        matches!(
            self.arch,
            Architecture::ResnetMini {
                batch_norm: true,
                ..
            }
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.classes < 2 {
            return bad(format!("class count must be >= 2, got {}", self.classes));
        }
        if self.input.is_empty() {
            return bad("input dimension must be >= 1".into());
        }
        match &self.arch {
            Architecture::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return bad(format!("hidden widths must be >= 1, got {hidden:?}"));
                }
            }
            Architecture::ResnetMini {
                widths,
                blocks_per_stage,
                ..
            } => {
                if !matches!(self.input, InputShape::Image { .. }) {
                    return bad("resnet-mini needs an image input shape".into());
                }
                if let InputShape::Image {
                    height,
                    width,
                    channels,
                } = self.input
                {
                    if height == 0 || width == 0 || channels == 0 {
                        return bad("image dimensions must be >= 1".into());
                    }
                }
                if widths.is_empty() || widths.contains(&0) {
                    return bad(format!(
                        "stage widths must be non-empty and >= 1, got {widths:?}"
                    ));
                }
                if *blocks_per_stage == 0 {
                    return bad("blocks per stage must be >= 1".into());
                }
            }
        }
        Ok(())
    }

    /// Canonical, order-stable text form. Two specs are equal iff their
    /// canonical strings are equal.
    pub fn canonical(&self) -> String {
        let mut s = format!("{CANONICAL_PREFIX};kind={}", self.arch.kind());
        s.push_str(&format!(";input={}", self.input));
        match &self.arch {
            Architecture::Mlp { hidden } => s.push_str(&format!(";hidden={}", join(hidden))),
            Architecture::ResnetMini {
                widths,
                blocks_per_stage,
                batch_norm,
            } => s.push_str(&format!(
                ";widths={};blocks={};bn={}",
                join(widths),
                blocks_per_stage,
                batch_norm
            )),
        }
        s.push_str(&format!(
            ";classes={};activation=relu;precision={}",
            self.classes, self.precision
        ));
        s
    }

    pub fn parse_canonical(s: &str) -> Result<Self> {
        let bad = || Error::InvalidSpec(format!("malformed canonical spec string {s:?}"));
        let mut parts = s.split(';');
        if parts.next() != Some(CANONICAL_PREFIX) {
            return Err(bad());
        }
        let mut kv = BTreeMap::new();
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(bad)?;
            if kv.insert(k, v).is_some() {
                return Err(bad());
            }
        }
        let mut take = |k: &str| kv.remove(k).ok_or_else(bad);
        let kind = take("kind")?;
        let input = InputShape::parse(take("input")?).ok_or_else(bad)?;
        let arch = match kind {
            "mlp" => Architecture::Mlp {
                hidden: parse_list(take("hidden")?).ok_or_else(bad)?,
            },
            "resnet-mini" => Architecture::ResnetMini {
                widths: parse_list(take("widths")?).ok_or_else(bad)?,
                blocks_per_stage: take("blocks")?.parse().map_err(|_| bad())?,
                batch_norm: take("bn")?.parse().map_err(|_| bad())?,
            },
            other => {
                return Err(Error::InvalidSpec(format!(
                    "unknown architecture kind {other:?}"
                )))
            }
        };
        let classes = take("classes")?.parse().map_err(|_| bad())?;
        if take("activation")? != "relu" {
            return Err(bad());
        }
        let precision = Precision::parse(take("precision")?).ok_or_else(bad)?;
        if !kv.is_empty() {
            return Err(bad());
        }
        let spec = ModelSpec {
            arch,
            input,
            classes,
            precision,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// First 8 bytes of SHA-256 over the canonical string.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.canonical().as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        u64::from_be_bytes(b)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        let specs = [
            ModelSpec::mlp(InputShape::image(28, 28, 1), &[300, 100], 10),
            ModelSpec::mlp(InputShape::Flat(5), &[], 3).with_precision(Precision::F64),
            ModelSpec::resnet_mini(InputShape::image(32, 32, 3), 10, true),
            ModelSpec::resnet_mini(InputShape::image(8, 8, 3), 4, false),
        ];
        for s in specs {
            let c = s.canonical();
            assert_eq!(ModelSpec::parse_canonical(&c).unwrap(), s);
        }
    }

    #[test]
    fn hash_is_stable() {
        let s = ModelSpec::mlp(InputShape::image(28, 28, 1), &[300, 100], 10);
        assert_eq!(
            s.canonical(),
            "linpath-model/1;kind=mlp;input=28x28x1;hidden=300,100;classes=10;activation=relu;precision=f32"
        );
        assert_eq!(s.hash(), s.clone().hash());
        let other = s.clone().with_precision(Precision::F64);
        assert_ne!(s.hash(), other.hash());
    }

    #[test]
    fn validation_errors() {
        assert!(ModelSpec::mlp(InputShape::Flat(4), &[3, 0], 2)
            .validate()
            .is_err());
        assert!(ModelSpec::mlp(InputShape::Flat(4), &[3], 1)
            .validate()
            .is_err());
        assert!(ModelSpec::resnet_mini(InputShape::Flat(12), 3, true)
            .validate()
            .is_err());
        let mut r = ModelSpec::resnet_mini(InputShape::image(4, 4, 1), 3, true);
        r.arch = Architecture::ResnetMini {
            widths: vec![4, 0],
            blocks_per_stage: 1,
            batch_norm: true,
        };
        assert!(r.validate().is_err());
        assert!(
            ModelSpec::parse_canonical("linpath-model/1;kind=vgg;input=flat:3;classes=2").is_err()
        );
    }
}
