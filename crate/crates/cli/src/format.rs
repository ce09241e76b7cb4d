//! File formats: CPNN-JSON v1 models and DSET-JSON v1 datasets, with
//! byte-stable write→read→write round-trips (fixed field order, shortest
//! round-trip float encoding).

use anyhow::{anyhow, bail, Context, Result};
use cpnn_core::cp::{CpKernel, CpMode};
use cpnn_core::harness::Dataset;
use cpnn_core::network::{LayerSpec, NetworkModel};
use cpnn_core::tensor::DenseTensor;
use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerJson>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerJson {
    #[serde(rename = "conv_dense")]
    ConvDense {
        s: usize,
        o: usize,
        kx: usize,
        ky: usize,
        /// [o][s][kx][ky]
        weights: Vec<Vec<Vec<Vec<f64>>>>,
    },
    #[serde(rename = "conv_cp")]
    ConvCp {
        s: usize,
        o: usize,
        kx: usize,
        ky: usize,
        rank: usize,
        lambdas: Vec<f64>,
        /// input-channel factors [R][s]
        a: Vec<Vec<f64>>,
        /// output-channel factors [R][o]
        b: Vec<Vec<f64>>,
        /// spatial factors [R][kx][ky]
        c: Vec<Vec<Vec<f64>>>,
    },
    #[serde(rename = "fc_dense")]
    FcDense {
        s1: usize,
        s2: usize,
        s1p: usize,
        s2p: usize,
        /// [s1][s2][s1p][s2p]
        weights: Vec<Vec<Vec<Vec<f64>>>>,
    },
    #[serde(rename = "fc_cp")]
    FcCp {
        s1: usize,
        s2: usize,
        s1p: usize,
        s2p: usize,
        rank: usize,
        mode: String,
        lambdas: Vec<f64>,
        /// "matrices": [R][s1][s2] and [R][s1p][s2p]; "vectors": [R][s1],
        /// [R][s2], [R][s1p], [R][s2p] flattened into two blocks of two.
        factors: Vec<Vec<Vec<Vec<f64>>>>,
    },
    #[serde(rename = "skip")]
    Skip { inner: Box<LayerJson> },
}

fn nest4(t: &DenseTensor) -> Vec<Vec<Vec<Vec<f64>>>> {
    let (d0, d1, d2, d3) = (t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
    (0..d0)
        .map(|i| {
            (0..d1)
                .map(|j| {
                    (0..d2)
                        .map(|k| (0..d3).map(|l| t.get(&[i, j, k, l])).collect())
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn unnest4(v: &[Vec<Vec<Vec<f64>>>], shape: &[usize; 4]) -> Result<DenseTensor> {
    let mut data = Vec::with_capacity(shape.iter().product());
    if v.len() != shape[0] {
        bail!("weights outer length {} != {}", v.len(), shape[0]);
    }
    for a in v {
        if a.len() != shape[1] {
            bail!("weights depth-1 length mismatch");
        }
        for b in a {
            if b.len() != shape[2] {
                bail!("weights depth-2 length mismatch");
            }
            for c in b {
                if c.len() != shape[3] {
                    bail!("weights depth-3 length mismatch");
                }
                data.extend_from_slice(c);
            }
        }
    }
    Ok(DenseTensor::from_vec(&[shape[0], shape[1], shape[2], shape[3]], data)?)
}

fn spatial_nested(f: &[f64], kx: usize, ky: usize) -> Vec<Vec<f64>> {
    (0..kx).map(|i| f[i * ky..(i + 1) * ky].to_vec()).collect()
}

fn layer_to_json(layer: &LayerSpec) -> Result<LayerJson> {
    Ok(match layer {
        LayerSpec::ConvDense { s, o, kx, ky, weights } => LayerJson::ConvDense {
            s: *s,
            o: *o,
            kx: *kx,
            ky: *ky,
            weights: nest4(weights),
        },
        LayerSpec::ConvCp { s, o, kx, ky, kernel } => {
            let r = kernel.width();
            LayerJson::ConvCp {
                s: *s,
                o: *o,
                kx: *kx,
                ky: *ky,
                rank: r,
                lambdas: kernel.lambdas.clone(),
                a: kernel.modes[1].factors.clone(),
                b: kernel.modes[0].factors.clone(),
                c: kernel.modes[2]
                    .factors
                    .iter()
                    .map(|f| spatial_nested(f, *kx, *ky))
                    .collect(),
            }
        }
        LayerSpec::FcDense { s1, s2, s1p, s2p, weights } => LayerJson::FcDense {
            s1: *s1,
            s2: *s2,
            s1p: *s1p,
            s2p: *s2p,
            weights: nest4(weights),
        },
        LayerSpec::FcCp { s1, s2, s1p, s2p, kernel } => {
            let r = kernel.width();
            let (mode, factors) = match kernel.modes.len() {
                2 => (
                    "matrices".to_string(),
                    vec![
                        kernel.modes[0]
                            .factors
                            .iter()
                            .map(|f| spatial_nested(f, *s1, *s2))
                            .collect(),
                        kernel.modes[1]
                            .factors
                            .iter()
                            .map(|f| spatial_nested(f, *s1p, *s2p))
                            .collect(),
                    ],
                ),
                4 => (
                    "vectors".to_string(),
                    kernel
                        .modes
                        .iter()
                        .map(|m| m.factors.iter().map(|f| vec![f.clone()]).collect())
                        .collect(),
                ),
                n => bail!("fc kernel has {n} modes; expected 2 or 4"),
            };
            LayerJson::FcCp {
                s1: *s1,
                s2: *s2,
                s1p: *s1p,
                s2p: *s2p,
                rank: r,
                mode,
                lambdas: kernel.lambdas.clone(),
                factors,
            }
        }
        LayerSpec::Skip { inner } => LayerJson::Skip {
            inner: Box::new(layer_to_json(inner)?),
        },
    })
}

fn layer_from_json(j: &LayerJson) -> Result<LayerSpec> {
    Ok(match j {
        LayerJson::ConvDense { s, o, kx, ky, weights } => LayerSpec::ConvDense {
            s: *s,
            o: *o,
            kx: *kx,
            ky: *ky,
            weights: unnest4(weights, &[*o, *s, *kx, *ky])?,
        },
        LayerJson::ConvCp { s, o, kx, ky, rank, lambdas, a, b, c } => {
            if lambdas.len() != *rank || a.len() != *rank || b.len() != *rank || c.len() != *rank
            {
                bail!("conv_cp blocks disagree with rank {rank}");
            }
            let spatial: Vec<Vec<f64>> = c
                .iter()
                .map(|f| {
                    if f.len() != *kx || f.iter().any(|row| row.len() != *ky) {
                        bail!("spatial factor shape mismatch");
                    }
                    Ok(f.iter().flatten().copied().collect())
                })
                .collect::<Result<_>>()?;
            let modes = vec![
                CpMode { dims: vec![*o], factors: b.clone() },
                CpMode { dims: vec![*s], factors: a.clone() },
                CpMode { dims: vec![*kx, *ky], factors: spatial },
            ];
            LayerSpec::ConvCp {
                s: *s,
                o: *o,
                kx: *kx,
                ky: *ky,
                kernel: CpKernel { lambdas: lambdas.clone(), modes },
            }
        }
        LayerJson::FcDense { s1, s2, s1p, s2p, weights } => LayerSpec::FcDense {
            s1: *s1,
            s2: *s2,
            s1p: *s1p,
            s2p: *s2p,
            weights: unnest4(weights, &[*s1, *s2, *s1p, *s2p])?,
        },
        LayerJson::FcCp { s1, s2, s1p, s2p, rank, mode, lambdas, factors } => {
            if lambdas.len() != *rank {
                bail!("fc_cp lambdas disagree with rank {rank}");
            }
            let flatten_block = |block: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<f64>> {
                block
                    .iter()
                    .map(|f| f.iter().flatten().copied().collect())
                    .collect()
            };
            let modes = match mode.as_str() {
                "matrices" => {
                    if factors.len() != 2 {
                        bail!("fc_cp matrices mode needs 2 factor blocks");
                    }
                    vec![
                        CpMode { dims: vec![*s1, *s2], factors: flatten_block(&factors[0]) },
                        CpMode { dims: vec![*s1p, *s2p], factors: flatten_block(&factors[1]) },
                    ]
                }
                "vectors" => {
                    if factors.len() != 4 {
                        bail!("fc_cp vectors mode needs 4 factor blocks");
                    }
                    let dims = [*s1, *s2, *s1p, *s2p];
                    factors
                        .iter()
                        .zip(dims)
                        .map(|(block, d)| CpMode {
                            dims: vec![d],
                            factors: flatten_block(block),
                        })
                        .collect()
                }
                other => bail!("unknown fc_cp mode {other:?}"),
            };
            LayerSpec::FcCp {
                s1: *s1,
                s2: *s2,
                s1p: *s1p,
                s2p: *s2p,
                kernel: CpKernel { lambdas: lambdas.clone(), modes },
            }
        }
        LayerJson::Skip { inner } => LayerSpec::Skip {
            inner: Box::new(layer_from_json(inner)?),
        },
    })
}

pub fn model_to_json(model: &NetworkModel) -> Result<String> {
    let file = ModelFile {
        version: 1,
        input_shape: model.input_shape.clone(),
        layers: model
            .layers
            .iter()
            .map(layer_to_json)
            .collect::<Result<_>>()?,
    };
    Ok(serde_json::to_string_pretty(&file)? + "\n")
}

pub fn model_from_json(text: &str) -> Result<NetworkModel> {
    let file: ModelFile = serde_json::from_str(text).context("parsing CPNN-JSON")?;
    if file.version != 1 {
        bail!("unsupported model version {}", file.version);
    }
    let model = NetworkModel {
        layers: file
            .layers
            .iter()
            .map(layer_from_json)
            .collect::<Result<_>>()?,
        input_shape: file.input_shape,
    };
    model
        .validate()
        .map_err(|e| anyhow!("model invariants violated: {e}"))?;
    Ok(model)
}

#[derive(Serialize, Deserialize)]
pub struct DatasetFile {
    pub version: u32,
    pub num_classes: usize,
    pub input_shape: Vec<usize>,
    pub samples: Vec<SampleJson>,
}

#[derive(Serialize, Deserialize)]
pub struct SampleJson {
    pub x: Vec<f64>,
    pub y: usize,
}

pub fn dataset_to_json(dataset: &Dataset) -> Result<String> {
    let file = DatasetFile {
        version: 1,
        num_classes: dataset.num_classes,
        input_shape: dataset.input_shape.clone(),
        samples: dataset
            .samples
            .iter()
            .map(|(x, y)| SampleJson { x: x.data.clone(), y: *y })
            .collect(),
    };
    Ok(serde_json::to_string(&file)? + "\n")
}

pub fn dataset_from_json(text: &str) -> Result<Dataset> {
    let file: DatasetFile = serde_json::from_str(text).context("parsing DSET-JSON")?;
    if file.version != 1 {
        bail!("unsupported dataset version {}", file.version);
    }
    let expect: usize = file.input_shape.iter().product();
    let samples = file
        .samples
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            if s.x.len() != expect {
                bail!("sample {i}: {} values for shape {:?}", s.x.len(), file.input_shape);
            }
            if s.y >= file.num_classes {
                bail!("sample {i}: label {} out of range", s.y);
            }
            Ok((DenseTensor::from_vec(&file.input_shape, s.x)?, s.y))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        num_classes: file.num_classes,
        input_shape: file.input_shape,
    })
}
