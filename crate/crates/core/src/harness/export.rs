//! Architecture JSON and kernel-size distribution CSV.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::{self, CostModel};
use crate::error::{Error, Result};
use crate::meta_kernel::{CandidateSet, KernelShape};
use crate::supernet::{DerivedArch, SuperNet};
use crate::tensor::Tensor;

pub const ARCH_VERSION: u32 = 1;

/// On-disk form of a [`DerivedArch`].
///
/// `layers` lists the chosen kernel extent per filter (0 for None; the
/// height for non-square kernels), `choices` the exact option indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchExport {
    pub version: u32,
    pub candidates: Vec<KernelShape>,
    pub include_none: bool,
    pub layers: Vec<Vec<usize>>,
    pub choices: Vec<Vec<usize>>,
    pub flops: f64,
    /// Logit rows per layer.
    pub alpha: Vec<Vec<Vec<f64>>>,
}

impl ArchExport {
    pub fn from_arch(arch: &DerivedArch) -> Self {
        let layers = arch
            .shapes()
            .into_iter()
            .map(|l| l.into_iter().map(|s| s.map_or(0, |k| k.h())).collect())
            .collect();
        let alpha = arch
            .alpha
            .iter()
            .map(|a| {
                let n = a.shape().get(1).copied().unwrap_or(1).max(1);
                a.data().chunks(n).map(<[f64]>::to_vec).collect()
            })
            .collect();
        ArchExport {
            version: ARCH_VERSION,
            candidates: arch.candidates.shapes().to_vec(),
            include_none: arch.candidates.include_none(),
            layers,
            choices: arch.choices.clone(),
            flops: arch.flops,
            alpha,
        }
    }

    pub fn into_arch(self) -> Result<DerivedArch> {
        if self.version != ARCH_VERSION {
            return Err(Error::Serde(format!("unsupported architecture version {}", self.version)));
        }
        let candidates = CandidateSet::new(self.candidates, self.include_none)?;
        let n = candidates.num_options();
        let alpha = self
            .alpha
            .into_iter()
            .map(|rows| {
                let r = rows.len();
                Tensor::new(&[r, n], rows.into_iter().flatten().collect())
            })
            .collect::<Result<Vec<_>>>()?;
        for (l, (sizes, choices)) in self.layers.iter().zip(&self.choices).enumerate() {
            let expect: Vec<usize> = choices
                .iter()
                .map(|&c| candidates.option(c).map_or(0, |k| k.h()))
                .collect();
            if choices.iter().any(|&c| c >= n) || *sizes != expect {
                return Err(Error::Serde(format!("layer {l}: kernel sizes disagree with choices")));
            }
        }
        Ok(DerivedArch {
            candidates,
            choices: self.choices,
            flops: self.flops,
            alpha,
        })
    }
}

pub fn write_arch(arch: &DerivedArch, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(&ArchExport::from_arch(arch))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_arch(path: &Path) -> Result<DerivedArch> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str::<ArchExport>(&text)?.into_arch()
}

/// Recomputes the FLOPs of an imported architecture and compares with the stored field.
pub fn check_flops(arch: &DerivedArch, model: &CostModel) -> Result<f64> {
    let f = cost::flops_of_arch(&arch.choices, model)?;
    if f != arch.flops {
        return Err(Error::invalid(format!("stored FLOPs {} but recomputed {f}", arch.flops)));
    }
    Ok(f)
}

pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    net: SuperNet,
}

/// Saves a trained network (weights and kernel state) as JSON.
pub fn write_model(net: &SuperNet, path: &Path) -> Result<()> {
    let f = ModelFile {
        version: MODEL_VERSION,
        net: net.clone(),
    };
    std::fs::write(path, serde_json::to_string(&f)?).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: &Path) -> Result<SuperNet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let f: ModelFile = serde_json::from_str(&text)?;
    if f.version != MODEL_VERSION {
        return Err(Error::Serde(format!("unsupported model version {}", f.version)));
    }
    f.net.config.validate()?;
    Ok(f.net)
}

/// Per-layer filter counts per option.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelDistribution {
    /// Column names: `size_0` for None, `size_k` for square `k×k`, `size_hxw` otherwise.
    pub columns: Vec<String>,
    pub rows: Vec<Vec<usize>>,
}

fn column_name(shape: Option<KernelShape>) -> String {
    match shape {
        None => "size_0".into(),
        Some(k) if k.is_square() => format!("size_{}", k.h()),
        Some(k) => format!("size_{}x{}", k.h(), k.w()),
    }
}

pub fn kernel_distribution(arch: &DerivedArch) -> KernelDistribution {
    let set = &arch.candidates;
    let mut order: Vec<usize> = (0..set.num_options()).collect();
    // None first, then by area
    order.sort_by_key(|&o| (set.option(o).map_or(0, KernelShape::area), o));
    let columns = order.iter().map(|&o| column_name(set.option(o))).collect();
    let rows = arch
        .choices
        .iter()
        .map(|layer| {
            order
                .iter()
                .map(|&o| layer.iter().filter(|&&c| c == o).count())
                .collect()
        })
        .collect();
    KernelDistribution { columns, rows }
}

impl KernelDistribution {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["layer".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (i, row) in self.rows.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(ToString::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_err)?.clone();
        if header.get(0) != Some("layer") {
            return Err(Error::Serde("first CSV column must be `layer`".into()));
        }
        let columns = header.iter().skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            if rec.get(0) != Some(i.to_string().as_str()) {
                return Err(Error::Serde(format!("CSV row {i} has layer {:?}", rec.get(0))));
            }
            let row = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<usize>().map_err(|e| Error::Serde(format!("row {i}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(KernelDistribution { columns, rows })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Serde(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::LayerCostSpec;

    fn arch(choices: Vec<Vec<usize>>) -> DerivedArch {
        let set = CandidateSet::default_square();
        let alpha = choices
            .iter()
            .map(|l| {
                let mut t = Tensor::zeros(&[l.len(), 4]);
                for (row, &c) in t.data_mut().chunks_mut(4).zip(l) {
                    row[c] = 1.5;
                }
                t
            })
            .collect();
        DerivedArch {
            candidates: set,
            choices,
            flops: 123.0,
            alpha,
        }
    }

    #[test]
    fn distribution_matches_hand_tally() {
        let a = arch(vec![vec![1, 1, 1], vec![0, 3, 2, 3, 3]]);
        let d = kernel_distribution(&a);
        assert_eq!(d.columns, vec!["size_0", "size_3", "size_5", "size_7"]);
        assert_eq!(d.rows, vec![vec![0, 3, 0, 0], vec![1, 0, 1, 3]]);
        for (row, layer) in d.rows.iter().zip(&a.choices) {
            assert_eq!(row.iter().sum::<usize>(), layer.len());
        }
        let csv = d.to_csv().unwrap();
        assert_eq!(csv, "layer,size_0,size_3,size_5,size_7\n0,0,3,0,0\n1,1,0,1,3\n");
        assert_eq!(KernelDistribution::from_csv(&csv).unwrap(), d);
    }

    #[test]
    fn uniform_three_has_one_column() {
        let d = kernel_distribution(&arch(vec![vec![1; 4], vec![1; 2]]));
        let nonzero: Vec<usize> = (0..4).filter(|&c| d.rows.iter().any(|r| r[c] > 0)).collect();
        assert_eq!(nonzero, vec![1]);
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = arch(vec![vec![0, 2], vec![3, 1, 1]]);
        a.alpha[0].data_mut()[1] = 0.1 + 0.2;
        let p = dir.path().join("arch.json");
        write_arch(&a, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"layers\""));
        let e: ArchExport = serde_json::from_str(&text).unwrap();
        assert_eq!(e.layers, vec![vec![0, 5], vec![7, 3, 3]]);
        assert_eq!(read_arch(&p).unwrap(), a);

        let mut bad = e.clone();
        bad.layers[0][0] = 3;
        assert!(bad.into_arch().is_err());
    }

    #[test]
    fn flops_consistency_check() {
        let model = CostModel {
            layers: vec![LayerCostSpec {
                out_h: 2,
                out_w: 2,
                channels: 2,
                stride: 1,
                areas: vec![0.0, 9.0, 25.0, 49.0],
            }],
            fixed: 10.0,
        };
        let mut a = arch(vec![vec![1, 3]]);
        a.flops = 10.0 + 4.0 * (9.0 + 49.0);
        assert_eq!(check_flops(&a, &model).unwrap(), a.flops);
        a.flops += 1.0;
        assert!(check_flops(&a, &model).is_err());
    }
}
