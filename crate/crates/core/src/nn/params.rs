//! The flat parameter vector and its shape manifest.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::scalar::Real;
use super::spec::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Weight,
    Bias,
    BnGain,
    BnShift,
    BnRunningMean,
    BnRunningVar,
}

impl Role {
    pub fn tag(self) -> u8 {
        match self {
            Role::Weight => 0,
            Role::Bias => 1,
            Role::BnGain => 2,
            Role::BnShift => 3,
            Role::BnRunningMean => 4,
            Role::BnRunningVar => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Role::Weight,
            1 => Role::Bias,
            2 => Role::BnGain,
            3 => Role::BnShift,
            4 => Role::BnRunningMean,
            5 => Role::BnRunningVar,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Weight => "weight",
            Role::Bias => "bias",
            Role::BnGain => "bn-gain",
            Role::BnShift => "bn-shift",
            Role::BnRunningMean => "bn-running-mean",
            Role::BnRunningVar => "bn-running-var",
        }
    }

    /// Running statistics are state, not trainable parameters.
    pub fn is_running_stat(self) -> bool {
        matches!(self, Role::BnRunningMean | Role::BnRunningVar)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TensorInfo {
    pub name: String,
    pub role: Role,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

/// Ordered tensor layout. Offsets are contiguous and non-overlapping.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Manifest {
    tensors: Vec<TensorInfo>,
    len: usize,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its offset.
    pub fn push(&mut self, name: impl Into<String>, role: Role, shape: &[usize]) -> usize {
        let offset = self.len;
        let info = TensorInfo {
            name: name.into(),
            role,
            shape: shape.to_vec(),
            offset,
        };
        self.len += info.numel();
        self.tensors.push(info);
        offset
    }

    /// Rebuilds a manifest from explicit entries, checking contiguity.
    pub fn from_entries(tensors: Vec<TensorInfo>) -> Result<Self> {
        let mut len = 0;
        for t in &tensors {
            if t.offset != len {
                return Err(Error::Integrity(format!(
                    "tensor {} at offset {} but expected {}",
                    t.name, t.offset, len
                )));
            }
            len += t.numel();
        }
        Ok(Manifest { tensors, len })
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Boolean per entry: does this coordinate hold a running statistic.
    pub fn running_stat_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len];
        for t in &self.tensors {
            if t.role.is_running_stat() {
                mask[t.range()].fill(true);
            }
        }
        mask
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Values {
    pub fn len(&self) -> usize {
        match self {
            Values::F32(v) => v.len(),
            Values::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn precision(&self) -> Precision {
        match self {
            Values::F32(_) => Precision::F32,
            Values::F64(_) => Precision::F64,
        }
    }

    pub fn zeros(precision: Precision, len: usize) -> Self {
        match precision {
            Precision::F32 => Values::F32(vec![0.0; len]),
            Precision::F64 => Values::F64(vec![0.0; len]),
        }
    }

    pub fn get_f64(&self, i: usize) -> f64 {
        match self {
            Values::F32(v) => v[i] as f64,
            Values::F64(v) => v[i],
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Values::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Values::F64(v) => v.clone(),
        }
    }

    /// Bit-level equality (distinguishes -0.0 from 0.0, equates identical NaNs).
    pub fn bit_eq(&self, other: &Values) -> bool {
        match (self, other) {
            (Values::F32(a), Values::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Values::F64(a), Values::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

/// Complete network state: every weight, bias, BN gain/shift and BN running
/// statistic, flattened in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    manifest: Arc<Manifest>,
    values: Values,
}

impl ParamVector {
    pub fn new(manifest: Arc<Manifest>, values: Values) -> Result<Self> {
        if values.len() != manifest.len() {
            return Err(Error::Length {
                expected: manifest.len(),
                actual: values.len(),
            });
        }
        Ok(ParamVector { manifest, values })
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector {
            manifest: self.manifest.clone(),
            values: Values::zeros(self.precision(), self.len()),
        }
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn manifest_arc(&self) -> &Arc<Manifest> {
        &self.manifest
    }

    pub fn values(&self) -> &Values {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Values {
        &mut self.values
    }

    pub fn into_values(self) -> Values {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn precision(&self) -> Precision {
        self.values.precision()
    }

    pub fn as_slice<T: Real>(&self) -> Result<&[T]> {
        T::slice(&self.values).ok_or(Error::Precision {
            expected: T::PRECISION.name(),
            actual: self.precision().name(),
        })
    }

    pub fn as_mut_slice<T: Real>(&mut self) -> Result<&mut [T]> {
        let actual = self.precision().name();
        T::slice_mut(&mut self.values).ok_or(Error::Precision {
            expected: T::PRECISION.name(),
            actual,
        })
    }

    /// Values of one named tensor, widened to f64.
    pub fn tensor_f64(&self, name: &str) -> Option<Vec<f64>> {
        let info = self.manifest.get(name)?;
        Some(info.range().map(|i| self.values.get_f64(i)).collect())
    }

    pub fn bit_eq(&self, other: &ParamVector) -> bool {
        self.manifest == other.manifest && self.values.bit_eq(&other.values)
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.precision() == other.precision()
            && (Arc::ptr_eq(&self.manifest, &other.manifest) || self.manifest == other.manifest)
    }

    pub fn unflatten(&self) -> Vec<NamedTensor> {
        unflatten(&self.manifest, &self.values).expect("ParamVector length matches its manifest")
    }
}

/// One tensor of a network, detached from the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub role: Role,
    pub shape: Vec<usize>,
    pub data: Values,
}

/// Concatenates tensors in the given order into a single vector.
pub fn flatten(tensors: &[NamedTensor]) -> Result<ParamVector> {
    let precision = tensors
        .first()
        .map_or(Precision::F32, |t| t.data.precision());
    let mut manifest = Manifest::new();
    for t in tensors {
        let numel: usize = t.shape.iter().product();
        if t.data.len() != numel {
            return Err(Error::Length {
                expected: numel,
                actual: t.data.len(),
            });
        }
        if t.data.precision() != precision {
            return Err(Error::Precision {
                expected: precision.name(),
                actual: t.data.precision().name(),
            });
        }
        manifest.push(t.name.clone(), t.role, &t.shape);
    }
    let values = match precision {
        Precision::F32 => Values::F32(
            tensors
                .iter()
                .flat_map(|t| f32::slice(&t.data).unwrap().iter().copied())
                .collect(),
        ),
        Precision::F64 => Values::F64(
            tensors
                .iter()
                .flat_map(|t| f64::slice(&t.data).unwrap().iter().copied())
                .collect(),
        ),
    };
    ParamVector::new(Arc::new(manifest), values)
}

/// Splits a flat value array into named tensors according to `manifest`.
pub fn unflatten(manifest: &Manifest, values: &Values) -> Result<Vec<NamedTensor>> {
    if values.len() != manifest.len() {
        return Err(Error::Length {
            expected: manifest.len(),
            actual: values.len(),
        });
    }
    Ok(manifest
        .tensors()
        .iter()
        .map(|t| NamedTensor {
            name: t.name.clone(),
            role: t.role,
            shape: t.shape.clone(),
            data: match values {
                Values::F32(v) => Values::F32(v[t.range()].to_vec()),
                Values::F64(v) => Values::F64(v[t.range()].to_vec()),
            },
        })
        .collect())
}
