//! JSON form of a [`FlowMap`]: layer list with shapes, every float array as a
//! base64 blob of little-endian `f64`s so round trips are bit-exact.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{ActNorm, AffineLayer, CouplingLayer, FlowMap, Layer};
use crate::error::SpeError;

/// Little-endian `f64` array encoded as base64.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob(pub Vec<f64>);

impl Serialize for Blob {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let bytes: Vec<u8> = self.0.iter().flat_map(|v| v.to_le_bytes()).collect();
        s.serialize_str(&STANDARD.encode(bytes))
    }
}

impl<'de> Deserialize<'de> for Blob {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = STANDARD.decode(text).map_err(serde::de::Error::custom)?;
        if bytes.len() % 8 != 0 {
            return Err(serde::de::Error::custom("blob length is not a multiple of 8"));
        }
        Ok(Blob(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        ))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum LayerRepr {
    Actnorm {
        mean: Blob,
        std: Blob,
    },
    Affine {
        rank: usize,
        w: Blob,
        varphi: Blob,
        mu: Blob,
    },
    Coupling {
        reversed: bool,
        frequencies: usize,
        range: Blob,
        scale_clamp: Option<Blob>,
        scale_theta: Blob,
        scale_phase: Blob,
        shift_theta: Blob,
        shift_phase: Blob,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowRepr {
    dim: usize,
    layers: Vec<LayerRepr>,
}

impl Serialize for FlowMap {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::ActNorm(a) => LayerRepr::Actnorm {
                    mean: Blob(a.mean().to_vec()),
                    std: Blob(a.std().to_vec()),
                },
                Layer::Affine(a) => LayerRepr::Affine {
                    rank: a.rank(),
                    w: Blob(a.w().to_vec()),
                    varphi: Blob(vec![a.varphi()]),
                    mu: Blob(a.mu().to_vec()),
                },
                Layer::Coupling(c) => LayerRepr::Coupling {
                    reversed: c.reversed(),
                    frequencies: c.frequencies(),
                    range: Blob(vec![c.range()]),
                    scale_clamp: c.clamp().map(|m| Blob(vec![m])),
                    scale_theta: Blob(c.scale_features().theta().to_vec()),
                    scale_phase: Blob(c.scale_features().phase().to_vec()),
                    shift_theta: Blob(c.shift_features().theta().to_vec()),
                    shift_phase: Blob(c.shift_features().phase().to_vec()),
                },
            })
            .collect();
        FlowRepr { dim: self.dim, layers }.serialize(s)
    }
}

fn scalar(b: Blob, name: &str) -> Result<f64, SpeError> {
    match b.0.as_slice() {
        [v] => Ok(*v),
        _ => Err(SpeError::InvalidConfig(format!("{name} must hold one value"))),
    }
}

fn check_len(b: &Blob, want: usize, name: &str) -> Result<(), SpeError> {
    if b.0.len() != want {
        return Err(SpeError::InvalidConfig(format!(
            "{name}: expected {want} values, got {}",
            b.0.len()
        )));
    }
    Ok(())
}

fn build(repr: FlowRepr) -> Result<FlowMap, SpeError> {
    let d = repr.dim;
    if d < 2 {
        return Err(SpeError::InvalidConfig("flow dim must be >= 2".into()));
    }
    let mut layers = Vec::with_capacity(repr.layers.len());
    for l in repr.layers {
        layers.push(match l {
            LayerRepr::Actnorm { mean, std } => {
                check_len(&mean, d, "actnorm mean")?;
                check_len(&std, d, "actnorm std")?;
                if std.0.iter().any(|s| !(*s > 0.0)) {
                    return Err(SpeError::InvalidConfig("actnorm std must be > 0".into()));
                }
                Layer::ActNorm(ActNorm::new(mean.0, std.0))
            }
            LayerRepr::Affine { rank, w, varphi, mu } => {
                check_len(&w, d * rank, "affine w")?;
                check_len(&mu, d, "affine mu")?;
                Layer::Affine(AffineLayer::new(d, rank, w.0, scalar(varphi, "varphi")?, mu.0))
            }
            LayerRepr::Coupling {
                reversed,
                frequencies,
                range,
                scale_clamp,
                scale_theta,
                scale_phase,
                shift_theta,
                shift_phase,
            } => {
                let split = d.div_ceil(2);
                let (cols, rows) = if reversed { (d - split, split) } else { (split, d - split) };
                let k = frequencies;
                if k == 0 {
                    return Err(SpeError::InvalidConfig("coupling needs frequencies >= 1".into()));
                }
                check_len(&scale_theta, k * rows * cols, "scale theta")?;
                check_len(&shift_theta, k * rows * cols, "shift theta")?;
                check_len(&scale_phase, k * cols, "scale phase")?;
                check_len(&shift_phase, k * cols, "shift phase")?;
                let range = scalar(range, "range")?;
                if !(range > 0.0) {
                    return Err(SpeError::InvalidConfig("coupling range must be > 0".into()));
                }
                let clamp = scale_clamp.map(|b| scalar(b, "scale_clamp")).transpose()?;
                Layer::Coupling(CouplingLayer::new(
                    d,
                    reversed,
                    k,
                    range,
                    clamp,
                    (scale_theta.0, scale_phase.0),
                    (shift_theta.0, shift_phase.0),
                ))
            }
        });
    }
    FlowMap::from_layers(d, layers)
}

impl<'de> Deserialize<'de> for FlowMap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = FlowRepr::deserialize(d)?;
        build(repr).map_err(serde::de::Error::custom)
    }
}
