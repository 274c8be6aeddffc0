//! Sort-matching, exact feature distribution matching, and its interpolated
//! mixing variant (EFDMix).
//!
//! Sort-matching assigns the style vector's sorted values to the content
//! vector's rank positions, matching the full empirical distribution rather
//! than just low-order moments. EFDMix interpolates between content and
//! style with a per-instance weight `d`, with the subtracted content term
//! behind a stop-gradient: the content input keeps an identity Jacobian
//! regardless of `d`, while the style input contributes `(1 - d)` on the
//! rank-matched positions.

use ndarray::{ArrayD, Axis, Ix3, IxDyn};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use rand_pcg::Pcg64;

use crate::error::{Error, Result};
use crate::tape::{Arr, Tape, Var};

/// Per-instance mixing weight for EFDMix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixWeight {
    pub d: f64,
}

impl MixWeight {
    pub fn new(d: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&d) || !d.is_finite() {
            return Err(Error::InvalidParam(format!("mix weight d={d} not in [0,1]")));
        }
        Ok(Self { d })
    }

    /// Draw d ~ Beta(c, c). `c` must be positive.
    pub fn sample(c: f64, rng: &mut Pcg64) -> Result<Self> {
        if c.is_nan() || c <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "Beta concentration c={c} must be > 0"
            )));
        }
        let beta = Beta::new(c, c)
            .map_err(|e| Error::InvalidParam(format!("Beta({c},{c}): {e}")))?;
        Ok(Self {
            d: beta.sample(rng),
        })
    }
}

fn check_pair(w: &[f64], r: &[f64]) -> Result<()> {
    if w.len() != r.len() {
        return Err(Error::LengthMismatch {
            content: w.len(),
            style: r.len(),
        });
    }
    if w.is_empty() {
        return Err(Error::InvalidParam("empty value vector".into()));
    }
    if w.iter().chain(r.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("sort_matching input".into()));
    }
    Ok(())
}

/// Stable argsort: index order breaks ties (lowest original index first).
pub fn argsort(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    idx
}

/// Exact histogram matching of `w` onto `r`: out[tau_i] = r[kappa_i] where
/// tau = argsort(w) and kappa = argsort(r). The output is a permutation of
/// `r`'s values placed at `w`'s rank positions.
pub fn sort_matching(w: &[f64], r: &[f64]) -> Result<Vec<f64>> {
    check_pair(w, r)?;
    let tau = argsort(w);
    let kappa = argsort(r);
    let mut out = vec![0.0; w.len()];
    for (t, k) in tau.into_iter().zip(kappa) {
        out[t] = r[k];
    }
    Ok(out)
}

/// Value-level EFDMix: out[tau_i] = d * w[tau_i] + (1 - d) * r[kappa_i].
///
/// This is the forward value only; the gradient contract (identity Jacobian
/// to `w`, `(1-d)` to `r` on matched positions) lives in [`batch_efdmix`]'s
/// tape op.
pub fn efdmix(w: &[f64], r: &[f64], mix: MixWeight) -> Result<Vec<f64>> {
    check_pair(w, r)?;
    let d = mix.d;
    let tau = argsort(w);
    let kappa = argsort(r);
    let mut out = vec![0.0; w.len()];
    for (t, k) in tau.into_iter().zip(kappa) {
        out[t] = d * w[t] + (1.0 - d) * r[k];
    }
    Ok(out)
}

/// One step's style-mixing plan: a batch permutation giving each sample its
/// style partner, plus one mixing weight per sample.
#[derive(Debug, Clone)]
pub struct BatchMixPlan {
    pub perm: Vec<usize>,
    pub d: Vec<f64>,
}

impl BatchMixPlan {
    /// Uniform random batch permutation and d_i ~ Beta(c, c).
    pub fn sample(batch: usize, c: f64, rng: &mut Pcg64) -> Result<Self> {
        let mut perm: Vec<usize> = (0..batch).collect();
        // Fisher-Yates
        for i in (1..batch).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let d = (0..batch)
            .map(|_| MixWeight::sample(c, rng).map(|m| m.d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { perm, d })
    }

    /// Fixed plan, used by tests and by the identity-collapse probes.
    pub fn forced(perm: Vec<usize>, d: Vec<f64>) -> Self {
        assert_eq!(perm.len(), d.len());
        Self { perm, d }
    }

    pub fn identity(batch: usize) -> Self {
        Self {
            perm: (0..batch).collect(),
            d: vec![1.0; batch],
        }
    }
}

/// Differentiable EFDMix between two (B, C, L) tensors with per-sample d.
///
/// Backward routes the upstream gradient to `w` unchanged (the subtracted
/// sorted-content term is gradient-stopped) and scatters `(1 - d_b) * g` to
/// `r` through the rank-matching permutation.
pub fn efdmix_op(tape: &mut Tape, w: Var, r: Var, d: Vec<f64>) -> Var {
    let wv = tape.value(w).clone();
    let rv = tape.value(r).clone();
    assert_eq!(wv.shape(), rv.shape(), "efdmix_op shape mismatch");
    let w3 = wv.view().into_dimensionality::<Ix3>().expect("(B,C,L)");
    let r3 = rv.view().into_dimensionality::<Ix3>().expect("(B,C,L)");
    let (b, c, l) = w3.dim();
    assert_eq!(d.len(), b);

    // per-(sample, channel) rank matching over flattened spatial positions
    let mut out = ArrayD::zeros(IxDyn(&[b, c, l]));
    let mut taus: Vec<Vec<usize>> = Vec::with_capacity(b * c);
    let mut kappas: Vec<Vec<usize>> = Vec::with_capacity(b * c);
    for bi in 0..b {
        for ci in 0..c {
            let ws: Vec<f64> = w3.index_axis(Axis(0), bi).index_axis(Axis(0), ci).to_vec();
            let rs: Vec<f64> = r3.index_axis(Axis(0), bi).index_axis(Axis(0), ci).to_vec();
            let tau = argsort(&ws);
            let kappa = argsort(&rs);
            let db = d[bi];
            for (t, k) in tau.iter().zip(kappa.iter()) {
                out[[bi, ci, *t]] = db * ws[*t] + (1.0 - db) * rs[*k];
            }
            taus.push(tau);
            kappas.push(kappa);
        }
    }

    tape.push_custom(
        out,
        vec![w, r],
        Box::new(move |g, pv, _| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let (b, c, l) = g3.dim();
            // d(out)/d(w) = identity: stop-gradient removes the d-scaling
            let gw = g.clone();
            let mut gr = ArrayD::zeros(pv[1].raw_dim());
            for bi in 0..b {
                let scale = 1.0 - d[bi];
                for ci in 0..c {
                    let tau = &taus[bi * c + ci];
                    let kappa = &kappas[bi * c + ci];
                    for i in 0..l {
                        gr[[bi, ci, kappa[i]]] += scale * g3[[bi, ci, tau[i]]];
                    }
                }
            }
            vec![gw, gr]
        }),
    )
}

/// EFDMix across a feature batch: each sample's style source is `h[perm[i]]`,
/// mixing applied independently per channel over flattened H x W.
///
/// Batch size 1 has no style partner; the input is returned unchanged and a
/// warning is logged.
pub fn batch_efdmix(tape: &mut Tape, h: Var, plan: &BatchMixPlan) -> Var {
    let shape = tape.value(h).shape().to_vec();
    assert_eq!(shape.len(), 4, "batch_efdmix expects (B,C,H,W)");
    let (b, c, hh, ww) = (shape[0], shape[1], shape[2], shape[3]);
    if b < 2 {
        eprintln!("warning: batch_efdmix on batch of 1; no style partner, returning input");
        return h;
    }
    let flat = tape.reshape(h, &[b, c, hh * ww]);
    let style = tape.permute_batch(flat, plan.perm.clone());
    let mixed = efdmix_op(tape, flat, style, plan.d.clone());
    tape.reshape(mixed, &[b, c, hh, ww])
}

/// Value-level batch EFDMix used by oracles and non-graph callers.
pub fn batch_efdmix_values(h: &Arr, plan: &BatchMixPlan) -> Result<Arr> {
    let h4 = h
        .view()
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|_| Error::ShapeMismatch("batch_efdmix_values expects (B,C,H,W)".into()))?;
    let (b, c, hh, ww) = h4.dim();
    if b < 2 {
        return Ok(h.clone());
    }
    let mut out = ArrayD::zeros(IxDyn(&[b, c, hh, ww]));
    for bi in 0..b {
        let src = plan.perm[bi];
        let mix = MixWeight::new(plan.d[bi])?;
        for ci in 0..c {
            let wv: Vec<f64> = h4
                .index_axis(Axis(0), bi)
                .index_axis(Axis(0), ci)
                .iter()
                .copied()
                .collect();
            let rv: Vec<f64> = h4
                .index_axis(Axis(0), src)
                .index_axis(Axis(0), ci)
                .iter()
                .copied()
                .collect();
            let mixed = efdmix(&wv, &rv, mix)?;
            for (pos, val) in mixed.into_iter().enumerate() {
                out[[bi, ci, pos / ww, pos % ww]] = val;
            }
        }
    }
    Ok(out)
}
