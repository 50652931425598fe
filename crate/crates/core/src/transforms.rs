//! Learnable feature-space modulation of class prototypes.
//!
//! Every kind maps a prototype `p_c` to an unnormalized vector `u_c` and
//! returns `u_c / ||u_c||`:
//!
//! | kind            | `u_c`                                   |
//! |-----------------|-----------------------------------------|
//! | per-class shift | `p_c + s_c`                             |
//! | shared shift    | `p_c + s`                               |
//! | scale           | `p_c ⊙ m_c`                             |
//! | scale & shift   | `p_c ⊙ m_c + s_c`                       |
//! | FiLM            | `γ_c ⊙ p_c + β_c`, `[γ_c; β_c] = W p_c + b` |
//!
//! Parameters live in one flat buffer so optimizers and gradient checks can
//! treat every kind uniformly. Layouts:
//!
//! * per-class shift: `s` as `C × d`
//! * shared shift: `s` as `d`
//! * scale: `m` as `C × d`
//! * scale & shift: `m` as `C × d`, then `s` as `C × d`
//! * FiLM: `W` as `2d × d` row-major, then `b` as `2d`

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TpsError};
use crate::numkernel::{dot, normalize_in_place, with_row, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    PerClassShift,
    SharedShift,
    Scale,
    ScaleAndShift,
    Film,
}

impl TransformKind {
    pub const ALL: [TransformKind; 5] = [
        TransformKind::PerClassShift,
        TransformKind::SharedShift,
        TransformKind::Scale,
        TransformKind::ScaleAndShift,
        TransformKind::Film,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::PerClassShift => "shift",
            TransformKind::SharedShift => "shared-shift",
            TransformKind::Scale => "scale",
            TransformKind::ScaleAndShift => "scale-shift",
            TransformKind::Film => "film",
        }
    }

    /// Number of parameters for `classes` prototypes of dimension `dim`.
    pub fn param_len(self, classes: usize, dim: usize) -> usize {
        match self {
            TransformKind::PerClassShift | TransformKind::Scale => classes * dim,
            TransformKind::SharedShift => dim,
            TransformKind::ScaleAndShift => 2 * classes * dim,
            TransformKind::Film => 2 * dim * dim + 2 * dim,
        }
    }

    /// Whether freshly initialized parameters leave prototypes unchanged.
    pub fn identity_at_init(self) -> bool {
        !matches!(self, TransformKind::Film)
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "shift" | "per-class-shift" => Ok(TransformKind::PerClassShift),
            "shared-shift" | "shared" => Ok(TransformKind::SharedShift),
            "scale" => Ok(TransformKind::Scale),
            "scale-shift" | "scale-and-shift" => Ok(TransformKind::ScaleAndShift),
            "film" => Ok(TransformKind::Film),
            other => Err(format!(
                "unknown transform '{other}' (expected shift, shared-shift, scale, scale-shift, film)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamInit {
    pub shift_init: f64,
    pub scale_init: f64,
    pub film_init_sigma: f64,
}

impl Default for ParamInit {
    fn default() -> Self {
        ParamInit {
            shift_init: 0.0,
            scale_init: 1.0,
            film_init_sigma: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformParams {
    kind: TransformKind,
    classes: usize,
    dim: usize,
    data: Vec<f64>,
}

impl TransformParams {
    pub fn from_flat(kind: TransformKind, classes: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        let want = kind.param_len(classes, dim);
        if data.len() != want {
            return Err(TpsError::ShapeMismatch(format!(
                "{kind} with C={classes}, d={dim} needs {want} parameters, got {}",
                data.len()
            )));
        }
        Ok(TransformParams {
            kind,
            classes,
            dim,
            data,
        })
    }

    /// Zero-valued buffer with the same layout, used for gradients.
    pub fn zeros_like(&self) -> Self {
        TransformParams {
            kind: self.kind,
            classes: self.classes,
            dim: self.dim,
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_layout(&self, other: &TransformParams) -> bool {
        self.kind == other.kind && self.classes == other.classes && self.dim == other.dim
    }

    /// Shift for class `c` (per-class kinds) or the shared shift.
    pub fn shift(&self, c: usize) -> &[f64] {
        let d = self.dim;
        match self.kind {
            TransformKind::PerClassShift => &self.data[c * d..(c + 1) * d],
            TransformKind::SharedShift => &self.data,
            TransformKind::ScaleAndShift => {
                let base = self.classes * d;
                &self.data[base + c * d..base + (c + 1) * d]
            }
            TransformKind::Scale | TransformKind::Film => &[],
        }
    }

    pub fn scale(&self, c: usize) -> &[f64] {
        let d = self.dim;
        match self.kind {
            TransformKind::Scale | TransformKind::ScaleAndShift => &self.data[c * d..(c + 1) * d],
            _ => &[],
        }
    }

    /// FiLM weight (`2d × d`, row-major) and bias (`2d`).
    pub fn film(&self) -> (&[f64], &[f64]) {
        if self.kind != TransformKind::Film {
            return (&[], &[]);
        }
        self.data.split_at(2 * self.dim * self.dim)
    }
}

/// Fresh parameters for one adaptation episode.
pub fn init_params(kind: TransformKind, classes: usize, dim: usize, init: ParamInit, seed: u64) -> Result<TransformParams> {
    if classes == 0 || dim == 0 {
        return Err(TpsError::EmptyInput("transform needs C >= 1 and d >= 1"));
    }
    let len = kind.param_len(classes, dim);
    let data = match kind {
        TransformKind::PerClassShift | TransformKind::SharedShift => vec![init.shift_init; len],
        TransformKind::Scale => vec![init.scale_init; len],
        TransformKind::ScaleAndShift => {
            let mut v = vec![init.scale_init; classes * dim];
            v.resize(len, init.shift_init);
            v
        }
        TransformKind::Film => {
            if !(init.film_init_sigma >= 0.0 && init.film_init_sigma.is_finite()) {
                return Err(TpsError::Config(format!(
                    "FiLM init sigma must be >= 0, got {}",
                    init.film_init_sigma
                )));
            }
            let mut v = vec![0.0; len];
            if init.film_init_sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let normal = Normal::new(0.0, init.film_init_sigma).expect("sigma checked above");
                for w in &mut v[..2 * dim * dim] {
                    *w = normal.sample(&mut rng);
                }
            }
            v
        }
    };
    TransformParams::from_flat(kind, classes, dim, data)
}

/// Cached forward pass: the norms of the unnormalized rows `u_c` and the
/// normalized output rows.
#[derive(Debug, Clone)]
pub(crate) struct Forward {
    pub norms: Vec<f64>,
    pub output: Mat,
}

fn check_shapes(prototypes: &Mat, params: &TransformParams) -> Result<()> {
    if prototypes.rows() != params.classes || prototypes.cols() != params.dim {
        return Err(TpsError::ShapeMismatch(format!(
            "prototypes are {}x{}, parameters bound to {}x{}",
            prototypes.rows(),
            prototypes.cols(),
            params.classes,
            params.dim
        )));
    }
    Ok(())
}

/// Writes `u_c` for class `c` into `out`.
fn modulate(p: &[f64], params: &TransformParams, c: usize, out: &mut [f64]) {
    match params.kind {
        TransformKind::PerClassShift | TransformKind::SharedShift => {
            for ((o, a), s) in out.iter_mut().zip(p).zip(params.shift(c)) {
                *o = a + s;
            }
        }
        TransformKind::Scale => {
            for ((o, a), m) in out.iter_mut().zip(p).zip(params.scale(c)) {
                *o = a * m;
            }
        }
        TransformKind::ScaleAndShift => {
            let (m, s) = (params.scale(c), params.shift(c));
            for j in 0..p.len() {
                out[j] = p[j] * m[j] + s[j];
            }
        }
        TransformKind::Film => {
            let d = params.dim;
            let (w, b) = params.film();
            for j in 0..d {
                let gamma = dot(&w[j * d..(j + 1) * d], p) + b[j];
                let beta = dot(&w[(d + j) * d..(d + j + 1) * d], p) + b[d + j];
                out[j] = gamma * p[j] + beta;
            }
        }
    }
}

pub(crate) fn forward(prototypes: &Mat, params: &TransformParams) -> Result<Forward> {
    check_shapes(prototypes, params)?;
    let (rows, cols) = (prototypes.rows(), prototypes.cols());
    let mut output = Mat::zeros(rows, cols);
    let mut norms = Vec::with_capacity(rows);
    for c in 0..rows {
        let row = output.row_mut(c);
        modulate(prototypes.row(c), params, c, row);
        norms.push(normalize_in_place(row).map_err(|e| with_row(e, c))?);
    }
    Ok(Forward { norms, output })
}

/// Modulated, row-normalized prototypes. Fails with `ZeroNorm` carrying the
/// offending class index when a modulated row collapses.
pub fn apply_transform(prototypes: &Mat, params: &TransformParams) -> Result<Mat> {
    forward(prototypes, params).map(|f| f.output)
}

/// Accumulates `dL/dparams` given `dL/du` for every class.
pub(crate) fn backward(prototypes: &Mat, params: &TransformParams, grad_u: &Mat, grads: &mut TransformParams) {
    let (classes, d) = (params.classes, params.dim);
    let g = grads.as_mut_slice();
    match params.kind {
        TransformKind::PerClassShift => g.copy_from_slice(grad_u.as_slice()),
        TransformKind::SharedShift => {
            g.fill(0.0);
            for row in grad_u.iter_rows() {
                for (a, b) in g.iter_mut().zip(row) {
                    *a += b;
                }
            }
        }
        TransformKind::Scale => {
            for c in 0..classes {
                let (p, gu) = (prototypes.row(c), grad_u.row(c));
                for j in 0..d {
                    g[c * d + j] = gu[j] * p[j];
                }
            }
        }
        TransformKind::ScaleAndShift => {
            let (gm, gs) = g.split_at_mut(classes * d);
            for c in 0..classes {
                let (p, gu) = (prototypes.row(c), grad_u.row(c));
                for j in 0..d {
                    gm[c * d + j] = gu[j] * p[j];
                }
            }
            gs.copy_from_slice(grad_u.as_slice());
        }
        TransformKind::Film => {
            let (gw, gb) = g.split_at_mut(2 * d * d);
            gw.fill(0.0);
            gb.fill(0.0);
            let mut grad_h = vec![0.0; 2 * d];
            for c in 0..classes {
                let (p, gu) = (prototypes.row(c), grad_u.row(c));
                for j in 0..d {
                    // u_j = γ_j p_j + β_j
                    grad_h[j] = gu[j] * p[j];
                    grad_h[d + j] = gu[j];
                }
                for (r, &gh) in grad_h.iter().enumerate() {
                    gb[r] += gh;
                    for (gwk, pk) in gw[r * d..(r + 1) * d].iter_mut().zip(p) {
                        *gwk += gh * pk;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::norm;
    use proptest::prelude::*;

    fn basis2() -> Mat {
        Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap()
    }

    #[test]
    fn init_examples() {
        let p = init_params(TransformKind::PerClassShift, 3, 4, ParamInit::default(), 0).unwrap();
        assert_eq!(p.as_slice(), &[0.0; 12]);
        let s = init_params(TransformKind::Scale, 2, 2, ParamInit::default(), 0).unwrap();
        assert_eq!(s.as_slice(), &[1.0; 4]);
        let f1 = init_params(TransformKind::Film, 3, 5, ParamInit::default(), 42).unwrap();
        let f2 = init_params(TransformKind::Film, 3, 5, ParamInit::default(), 42).unwrap();
        assert_eq!(f1, f2);
        let (w, b) = f1.film();
        assert_eq!(w.len(), 50);
        assert!(b.iter().all(|&x| x == 0.0));
        assert!(w.iter().any(|&x| x != 0.0));
        assert_ne!(f1, init_params(TransformKind::Film, 3, 5, ParamInit::default(), 43).unwrap());
    }

    #[test]
    fn shift_example() {
        let p = Mat::from_rows(&[[1.0, 0.0]]).unwrap();
        let params = TransformParams::from_flat(TransformKind::PerClassShift, 1, 2, vec![-1.0, 1.0]).unwrap();
        assert_eq!(apply_transform(&p, &params).unwrap().as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn collapsed_row_reports_class() {
        let params = TransformParams::from_flat(TransformKind::PerClassShift, 2, 2, vec![0.0, 0.0, 0.0, -1.0]).unwrap();
        match apply_transform(&basis2(), &params) {
            Err(TpsError::ZeroNorm { row: Some(1), .. }) => {}
            other => panic!("expected ZeroNorm on row 1, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let params = init_params(TransformKind::PerClassShift, 3, 2, ParamInit::default(), 0).unwrap();
        assert!(matches!(apply_transform(&basis2(), &params), Err(TpsError::ShapeMismatch(_))));
        assert!(TransformParams::from_flat(TransformKind::SharedShift, 2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in TransformKind::ALL {
            assert_eq!(k.name().parse::<TransformKind>().unwrap(), k);
        }
        assert!("bogus".parse::<TransformKind>().is_err());
    }

    fn arb_prototypes() -> impl Strategy<Value = Mat> {
        (2usize..6, 2usize..8).prop_flat_map(|(c, d)| {
            prop::collection::vec(-1.0f64..1.0, c * d)
                .prop_filter("nonzero rows", move |v| v.chunks(d).all(|r| norm(r) > 1e-3))
                .prop_map(move |v| Mat::new(c, d, v).unwrap().normalized_rows().unwrap())
        })
    }

    proptest! {
        #[test]
        fn identity_at_init(p in arb_prototypes(), seed in any::<u64>()) {
            for kind in TransformKind::ALL.into_iter().filter(|k| k.identity_at_init()) {
                let params = init_params(kind, p.rows(), p.cols(), ParamInit::default(), seed).unwrap();
                let out = apply_transform(&p, &params).unwrap();
                for (a, b) in out.as_slice().iter().zip(p.as_slice()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn outputs_are_unit_norm(p in arb_prototypes(), seed in any::<u64>()) {
            for kind in TransformKind::ALL {
                let mut params = init_params(kind, p.rows(), p.cols(), ParamInit::default(), seed).unwrap();
                for (i, v) in params.as_mut_slice().iter_mut().enumerate() {
                    *v += 0.05 * ((i as f64 * 0.37).sin());
                }
                if let Ok(out) = apply_transform(&p, &params) {
                    for row in out.iter_rows() {
                        prop_assert!((norm(row) - 1.0).abs() < 1e-9);
                    }
                }
            }
        }

        #[test]
        fn shared_shift_preserves_differences(p in arb_prototypes(), s in prop::collection::vec(-0.3f64..0.3, 8)) {
            let d = p.cols();
            let shared = TransformParams::from_flat(TransformKind::SharedShift, p.rows(), d, s[..d].to_vec()).unwrap();
            let fwd = forward(&p, &shared).unwrap();
            for a in 0..p.rows() {
                for b in 0..p.rows() {
                    for j in 0..d {
                        let du = fwd.output.row(a)[j] * fwd.norms[a] - fwd.output.row(b)[j] * fwd.norms[b];
                        let dp = p.row(a)[j] - p.row(b)[j];
                        prop_assert!((du - dp).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn per_class_shift_breaks_differences() {
        let p = basis2();
        let params = TransformParams::from_flat(TransformKind::PerClassShift, 2, 2, vec![0.1, 0.0, 0.0, 0.2]).unwrap();
        let fwd = forward(&p, &params).unwrap();
        let du = fwd.output.row(0)[0] * fwd.norms[0] - fwd.output.row(1)[0] * fwd.norms[1];
        assert!((du - 1.0).abs() > 1e-3);
    }
}
