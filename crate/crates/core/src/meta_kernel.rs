//! Meta kernels, centered RoI probability masks and the aggregated kernel.
//!
//! Every candidate kernel shape is embedded at the center of one maximal
//! meta kernel. A candidate's mask carries its sampling probability inside
//! its RoI and zero elsewhere; the None option has an all-zero mask. Summing
//! the masks and multiplying by the meta kernel gives the single kernel that
//! replaces the probability-weighted mixture of candidate convolutions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Kernel extent as `(height, width)`; serialized as `[h, w]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KernelShape(pub usize, pub usize);

impl KernelShape {
    pub fn square(k: usize) -> Self {
        KernelShape(k, k)
    }

    pub fn h(self) -> usize {
        self.0
    }

    pub fn w(self) -> usize {
        self.1
    }

    pub fn area(self) -> usize {
        self.0 * self.1
    }

    pub fn is_square(self) -> bool {
        self.0 == self.1
    }

    /// `"3x3"`-style label.
    pub fn label(self) -> String {
        format!("{}x{}", self.0, self.1)
    }
}

/// Window of a candidate inside the meta shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Roi {
    pub top: usize,
    pub left: usize,
    pub h: usize,
    pub w: usize,
}

impl Roi {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.h && x >= self.left && x < self.left + self.w
    }
}

/// Centered RoI of `shape` inside `meta`.
pub fn roi_of(shape: KernelShape, meta: KernelShape) -> Result<Roi> {
    if shape.h() > meta.h() || shape.w() > meta.w() {
        return Err(Error::invalid(format!(
            "{} is not compatible with meta shape {}",
            shape.label(),
            meta.label()
        )));
    }
    if (meta.h() - shape.h()) % 2 != 0 || (meta.w() - shape.w()) % 2 != 0 {
        return Err(Error::invalid(format!(
            "{} cannot be centered in {}",
            shape.label(),
            meta.label()
        )));
    }
    Ok(Roi {
        top: (meta.h() - shape.h()) / 2,
        left: (meta.w() - shape.w()) / 2,
        h: shape.h(),
        w: shape.w(),
    })
}

/// Element-wise maxima of the candidate extents.
pub fn build_meta_shape(shapes: &[KernelShape]) -> Result<KernelShape> {
    if shapes.is_empty() {
        return Err(Error::invalid("candidate set is empty"));
    }
    if let Some(bad) = shapes.iter().find(|s| s.h() % 2 == 0 || s.w() % 2 == 0 || s.area() == 0) {
        return Err(Error::invalid(format!(
            "candidate extents must be odd and positive, got {}",
            bad.label()
        )));
    }
    let h = shapes.iter().map(|s| s.h()).max().unwrap_or(1);
    let w = shapes.iter().map(|s| s.w()).max().unwrap_or(1);
    Ok(KernelShape(h, w))
}

/// Searchable options of one layer: optional None followed by kernel shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    shapes: Vec<KernelShape>,
    include_none: bool,
}

impl CandidateSet {
    pub fn new(shapes: Vec<KernelShape>, include_none: bool) -> Result<Self> {
        build_meta_shape(&shapes)?;
        for (i, a) in shapes.iter().enumerate() {
            if shapes[..i].contains(a) {
                return Err(Error::invalid(format!("duplicate candidate {}", a.label())));
            }
        }
        Ok(CandidateSet {
            shapes,
            include_none,
        })
    }

    /// `{None, 3x3, 5x5, 7x7}`.
    pub fn default_square() -> Self {
        CandidateSet::new(vec![KernelShape::square(3), KernelShape::square(5), KernelShape::square(7)], true)
            .expect("valid default set")
    }

    pub fn shapes(&self) -> &[KernelShape] {
        &self.shapes
    }

    pub fn include_none(&self) -> bool {
        self.include_none
    }

    /// Number of kernel candidates, excluding None.
    pub fn num_candidates(&self) -> usize {
        self.shapes.len()
    }

    /// Length of an architecture-parameter vector.
    pub fn num_options(&self) -> usize {
        self.shapes.len() + usize::from(self.include_none)
    }

    /// Kernel shape of option `i`, `None` for the None option.
    pub fn option(&self, i: usize) -> Option<KernelShape> {
        if self.include_none {
            if i == 0 {
                None
            } else {
                Some(self.shapes[i - 1])
            }
        } else {
            Some(self.shapes[i])
        }
    }

    pub fn options(&self) -> impl Iterator<Item = Option<KernelShape>> + '_ {
        (0..self.num_options()).map(|i| self.option(i))
    }

    /// Option index of a kernel shape, or of None.
    pub fn index_of(&self, shape: Option<KernelShape>) -> Option<usize> {
        match shape {
            None => self.include_none.then_some(0),
            Some(s) => self
                .shapes
                .iter()
                .position(|&x| x == s)
                .map(|p| p + usize::from(self.include_none)),
        }
    }

    /// Kernel area of each option; None has area 0.
    pub fn areas(&self) -> Vec<f64> {
        self.options()
            .map(|o| o.map_or(0.0, |s| s.area() as f64))
            .collect()
    }

    pub fn meta_shape(&self) -> KernelShape {
        build_meta_shape(&self.shapes).expect("validated at construction")
    }

    pub fn roi(&self, option: usize) -> Option<Roi> {
        self.option(option)
            .map(|s| roi_of(s, self.meta_shape()).expect("validated at construction"))
    }

    /// `[num_options, ĥ·ŵ]` matrix of 0/1 RoI indicators (None row all zero).
    pub fn roi_indicator(&self) -> Tensor {
        let meta = self.meta_shape();
        let cells = meta.area();
        let mut data = vec![0.0; self.num_options() * cells];
        for opt in 0..self.num_options() {
            if let Some(roi) = self.roi(opt) {
                for y in 0..meta.h() {
                    for x in 0..meta.w() {
                        if roi.contains(y, x) {
                            data[opt * cells + y * meta.w() + x] = 1.0;
                        }
                    }
                }
            }
        }
        Tensor::new(&[self.num_options(), cells], data).expect("indicator shape")
    }

    /// Binary RoI indicator of one option as `[ĥ, ŵ]`.
    pub fn binary_mask(&self, option: usize) -> Tensor {
        let meta = self.meta_shape();
        let ind = self.roi_indicator();
        let cells = meta.area();
        Tensor::new(&[meta.h(), meta.w()], ind.data()[option * cells..(option + 1) * cells].to_vec())
            .expect("mask shape")
    }
}

/// Probability mask of one option.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMask {
    pub option: usize,
    pub values: Tensor,
}

fn check_probs(probs: &[f64], n: usize) -> Result<()> {
    if probs.len() != n {
        return Err(Error::invalid(format!("expected {n} probabilities, got {}", probs.len())));
    }
    if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
        return Err(Error::invalid(format!("invalid probability {p}")));
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("probabilities sum to {s}, not 1")));
    }
    Ok(())
}

/// One mask per option; option `i` holds `probs[i]` on its RoI and 0 elsewhere.
pub fn build_masks(candidates: &CandidateSet, probs: &[f64]) -> Result<Vec<ProbMask>> {
    check_probs(probs, candidates.num_options())?;
    Ok((0..candidates.num_options())
        .map(|opt| ProbMask {
            option: opt,
            values: candidates.binary_mask(opt).scale(probs[opt]),
        })
        .collect())
}

/// Element-wise sum of a mask list.
pub fn summed_mask(masks: &[ProbMask]) -> Result<Tensor> {
    let first = masks
        .first()
        .ok_or_else(|| Error::invalid("empty mask list"))?;
    let mut acc = Tensor::zeros(first.values.shape());
    for m in masks {
        acc.add_assign(&m.values)?;
    }
    Ok(acc)
}

/// `(Σᵢ Mᵢ) ∘ K̂`, broadcast over every filter of a `[C, 1, ĥ, ŵ]` meta kernel.
pub fn effective_kernel(meta: &Tensor, masks: &[ProbMask]) -> Result<Tensor> {
    let total = summed_mask(masks)?;
    let [_, one, kh, kw] = meta.dims4()?;
    if one != 1 || total.shape() != [kh, kw] {
        return Err(Error::shape(format!(
            "masks of shape {:?} for meta kernel {:?}",
            total.shape(),
            meta.shape()
        )));
    }
    let data = meta
        .data()
        .chunks(kh * kw)
        .flat_map(|plane| plane.iter().zip(total.data()).map(|(k, m)| k * m))
        .collect();
    Tensor::new(meta.shape(), data)
}

/// Per-filter variant: `masks[c]` is the mask list of filter `c`.
pub fn effective_kernel_per_filter(meta: &Tensor, masks: &[Vec<ProbMask>]) -> Result<Tensor> {
    let [c, _, kh, kw] = meta.dims4()?;
    if masks.len() != c {
        return Err(Error::shape(format!("{} mask lists for {c} filters", masks.len())));
    }
    let mut data = Vec::with_capacity(meta.len());
    for (plane, filter_masks) in meta.data().chunks(kh * kw).zip(masks) {
        let total = summed_mask(filter_masks)?;
        if total.shape() != [kh, kw] {
            return Err(Error::shape("mask shape differs from meta shape"));
        }
        data.extend(plane.iter().zip(total.data()).map(|(k, m)| k * m));
    }
    Tensor::new(meta.shape(), data)
}

/// Taped effective kernel from a `[C or 1, num_options]` probability matrix.
///
/// The summed mask of each filter is `probs · indicator`, so the gradient
/// reaches both the meta kernel and the probabilities.
pub fn effective_kernel_var(tape: &Tape, meta: Var, probs: Var, candidates: &CandidateSet) -> Result<Var> {
    let mshape = tape.shape(meta);
    let [c, one, kh, kw] = mshape[..] else {
        return Err(Error::shape(format!("meta kernel must be rank 4, got {mshape:?}")));
    };
    let ms = candidates.meta_shape();
    if one != 1 || (kh, kw) != (ms.h(), ms.w()) {
        return Err(Error::shape(format!(
            "meta kernel {mshape:?} does not match meta shape {}",
            ms.label()
        )));
    }
    let indicator = tape.constant(candidates.roi_indicator());
    let mut mask = tape.matmul(probs, indicator)?;
    match tape.shape(mask)[0] {
        1 if c != 1 => mask = tape.expand_rows(mask, c)?,
        r if r == c => {}
        r => return Err(Error::shape(format!("{r} probability rows for {c} filters"))),
    }
    let mask = tape.reshape(mask, &[c, 1, kh, kw])?;
    tape.mul(meta, mask)
}

/// Trainable `[C, 1, ĥ, ŵ]` meta kernel of one depthwise layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaKernel {
    pub weights: Tensor,
}

impl MetaKernel {
    /// Zero-mean normal init with std `sqrt(2 / (ĥ·ŵ))`.
    pub fn init<R: Rng + ?Sized>(channels: usize, meta: KernelShape, rng: &mut R) -> Self {
        let std = (2.0 / meta.area() as f64).sqrt();
        MetaKernel {
            weights: Tensor::randn(&[channels, 1, meta.h(), meta.w()], std, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn shape(&self) -> KernelShape {
        KernelShape(self.weights.shape()[2], self.weights.shape()[3])
    }

    /// Candidate `shape` sliced out of the meta kernel, `[C, 1, h, w]`.
    pub fn slice(&self, shape: KernelShape) -> Result<Tensor> {
        let roi = roi_of(shape, self.shape())?;
        let meta = self.shape();
        let mut data = Vec::with_capacity(self.channels() * shape.area());
        for plane in self.weights.data().chunks(meta.area()) {
            for i in 0..roi.h {
                let row = (roi.top + i) * meta.w() + roi.left;
                data.extend_from_slice(&plane[row..row + roi.w]);
            }
        }
        Tensor::new(&[self.channels(), 1, shape.h(), shape.w()], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::{depthwise_conv2d, Padding};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sq(k: usize) -> KernelShape {
        KernelShape::square(k)
    }

    #[test]
    fn meta_shape_examples() {
        assert_eq!(build_meta_shape(&[sq(3), sq(5), sq(7)]).unwrap(), sq(7));
        assert_eq!(build_meta_shape(&[sq(3)]).unwrap(), sq(3));
        assert_eq!(build_meta_shape(&[KernelShape(3, 1), KernelShape(1, 3)]).unwrap(), sq(3));
        assert!(build_meta_shape(&[]).is_err());
        assert!(build_meta_shape(&[sq(4)]).is_err());
        assert!(CandidateSet::new(vec![sq(3), sq(3)], true).is_err());
    }

    #[test]
    fn roi_examples() {
        assert_eq!(roi_of(sq(3), sq(7)).unwrap(), Roi { top: 2, left: 2, h: 3, w: 3 });
        assert_eq!(roi_of(sq(5), sq(5)).unwrap(), Roi { top: 0, left: 0, h: 5, w: 5 });
        assert_eq!(roi_of(KernelShape(1, 3), sq(3)).unwrap(), Roi { top: 1, left: 0, h: 1, w: 3 });
        assert!(roi_of(sq(7), sq(5)).is_err());
    }

    #[test]
    fn single_candidate_mask_by_enumeration() {
        let set = CandidateSet::new(vec![sq(3), sq(7)], true).unwrap();
        let masks = build_masks(&set, &[0.0, 1.0, 0.0]).unwrap();
        let m = &masks[1].values;
        let mut inside = 0;
        for y in 0..7 {
            for x in 0..7 {
                let v = m.data()[y * 7 + x];
                if (2..5).contains(&y) && (2..5).contains(&x) {
                    assert_eq!(v, 1.0);
                    inside += 1;
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
        assert_eq!(inside, 9);
        assert_eq!(masks[0].values, Tensor::zeros(&[7, 7]));
    }

    #[test]
    fn cumulative_mask_values() {
        let set = CandidateSet::new(vec![sq(3), sq(5)], true).unwrap();
        let total = summed_mask(&build_masks(&set, &[0.0, 0.25, 0.75]).unwrap()).unwrap();
        assert_eq!(total.data()[2 * 5 + 2], 1.0);
        assert_eq!(total.data()[0], 0.75);
        assert_eq!(total.data()[5 + 2], 1.0);
        assert_eq!(total.data()[2], 0.75);
    }

    #[test]
    fn mask_probability_validation() {
        let set = CandidateSet::default_square();
        assert!(build_masks(&set, &[0.5, 0.5, 0.1, -0.1]).is_err());
        assert!(build_masks(&set, &[0.5, 0.5, 0.1, 0.0]).is_err());
        assert!(build_masks(&set, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn effective_kernel_examples() {
        let set = CandidateSet::new(vec![sq(3), sq(5)], true).unwrap();
        let meta = Tensor::ones(&[2, 1, 5, 5]);
        let eff = effective_kernel(&meta, &build_masks(&set, &[0.3, 0.2, 0.5]).unwrap()).unwrap();
        for c in 0..2 {
            for y in 0..5 {
                for x in 0..5 {
                    let inner = (1..4).contains(&y) && (1..4).contains(&x);
                    let expect = if inner { 0.7 } else { 0.5 };
                    assert!((eff.at4(c, 0, y, x) - expect).abs() < 1e-15);
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let meta = Tensor::randn(&[3, 1, 5, 5], 1.0, &mut rng);
        let full = effective_kernel(&meta, &build_masks(&set, &[0.0, 0.0, 1.0]).unwrap()).unwrap();
        assert_eq!(full, meta);
        let none = effective_kernel(&meta, &build_masks(&set, &[1.0, 0.0, 0.0]).unwrap()).unwrap();
        assert!(none.data().iter().all(|&v| v == 0.0));
        let x = Tensor::randn(&[1, 3, 6, 6], 1.0, &mut rng);
        let y = depthwise_conv2d(&x, &none, 1, Padding::Same).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(effective_kernel(&Tensor::ones(&[1, 1, 3, 3]), &build_masks(&set, &[1.0, 0.0, 0.0]).unwrap()).is_err());
    }

    #[test]
    fn taped_kernel_matches_plain() {
        let set = CandidateSet::default_square();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let meta = MetaKernel::init(3, set.meta_shape(), &mut rng);
        let probs = [[0.1, 0.2, 0.3, 0.4], [0.4, 0.3, 0.2, 0.1], [0.0, 0.0, 1.0, 0.0]];
        let plain = effective_kernel_per_filter(
            &meta.weights,
            &probs.iter().map(|p| build_masks(&set, p).unwrap()).collect::<Vec<_>>(),
        )
        .unwrap();
        let tape = Tape::new();
        let m = tape.param(meta.weights.clone());
        let p = tape.constant(Tensor::new(&[3, 4], probs.concat()).unwrap());
        let k = effective_kernel_var(&tape, m, p, &set).unwrap();
        assert!(tape.value(k).max_rel_diff(&plain, 1.0).unwrap() < 1e-15);

        let shared = tape.constant(Tensor::new(&[1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let k = effective_kernel_var(&tape, m, shared, &set).unwrap();
        let plain = effective_kernel(&meta.weights, &build_masks(&set, &probs[0]).unwrap()).unwrap();
        assert!(tape.value(k).max_rel_diff(&plain, 1.0).unwrap() < 1e-15);
    }

    #[test]
    fn slice_matches_masked_meta() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mk = MetaKernel::init(2, sq(7), &mut rng);
        let s = mk.slice(sq(3)).unwrap();
        for c in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(s.at4(c, 0, i, j), mk.weights.at4(c, 0, i + 2, j + 2));
                }
            }
        }
    }

    #[test]
    fn init_scale_uses_meta_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mk = MetaKernel::init(400, sq(7), &mut rng);
        let n = mk.weights.len() as f64;
        let mean = mk.weights.sum() / n;
        let var = mk.weights.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 2.0 / 49.0).abs() < 0.004, "{var}");
        assert!(mean.abs() < 0.01);
    }

    fn probs_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, n).prop_filter_map("non-zero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-3).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn mask_support_and_nesting(probs in probs_strategy(4)) {
            let set = CandidateSet::default_square();
            let masks = build_masks(&set, &probs).unwrap();
            for m in &masks {
                for y in 0..7 {
                    for x in 0..7 {
                        let v = m.values.data()[y * 7 + x];
                        let inside = set.roi(m.option).is_some_and(|r| r.contains(y, x));
                        prop_assert_eq!(v, if inside { probs[m.option] } else { 0.0 });
                    }
                }
            }
            // cumulative mask equals mass of candidates covering the cell and
            // never increases away from the center ring by ring
            let total = summed_mask(&masks).unwrap();
            let ring = |y: usize, x: usize| (y as isize - 3).abs().max((x as isize - 3).abs()) as usize;
            for y in 0..7 {
                for x in 0..7 {
                    let covering: f64 = (0..4)
                        .filter(|&o| set.roi(o).is_some_and(|r| r.contains(y, x)))
                        .map(|o| probs[o])
                        .sum();
                    prop_assert!((total.data()[y * 7 + x] - covering).abs() < 1e-15);
                }
            }
            for r in 1..4 {
                prop_assert!(total.data()[(3 - r) * 7 + 3] <= total.data()[(3 - r + 1) * 7 + 3] + 1e-15);
                prop_assert_eq!(ring(3 - r, 3), r);
            }
        }

        #[test]
        fn one_convolution_equals_weighted_candidate_sum(probs in probs_strategy(4), seed in any::<u64>(), stride in 1usize..3) {
            let set = CandidateSet::default_square();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let meta = MetaKernel::init(2, set.meta_shape(), &mut rng);
            let x = Tensor::randn(&[2, 2, 9, 8], 1.0, &mut rng);
            let eff = effective_kernel(&meta.weights, &build_masks(&set, &probs).unwrap()).unwrap();
            let merged = depthwise_conv2d(&x, &eff, stride, Padding::Same).unwrap();
            let mut summed = Tensor::zeros(merged.shape());
            for (o, p) in probs.iter().enumerate() {
                let bin = set.binary_mask(o);
                let mut k = meta.weights.clone();
                for (c, v) in k.data_mut().iter_mut().enumerate() {
                    *v *= bin.data()[c % bin.len()];
                }
                summed.add_assign(&depthwise_conv2d(&x, &k, stride, Padding::Same).unwrap().scale(*p)).unwrap();
            }
            prop_assert!(merged.max_rel_diff(&summed, 1.0).unwrap() < 1e-12);
        }
    }
}
