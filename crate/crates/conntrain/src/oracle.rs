//! Independent correctness routes: an explicit input-to-output path
//! enumeration for dense ReLU networks, an f64 reference forward for
//! finite-difference gradient checks, and brute-force mask search on tiny
//! networks.
//!
//! Everything here recomputes from first principles — none of it calls the
//! production forward/backward except as the object under test.

use crate::layers::{LayerDesc, NetError, Network};
use crate::masking::Mode;
use crate::tensor::Tensor;
use crate::train::{loss_free, TrainError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("{paths} paths exceed the enumeration limit {limit}")]
    TooManyPaths { paths: usize, limit: usize },
    #[error("path enumeration needs a fully dense network, found {0}")]
    NotDense(&'static str),
    #[error("layer {0} does not have constant weight magnitude")]
    NotConstantMagnitude(usize),
    #[error("{m} mask bits exceed the search limit {limit}")]
    TooManyMaskBits { m: usize, limit: usize },
    #[error("mask search needs a prune-mode network, got {0:?}")]
    NotPruneMode(Mode),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Mask(#[from] crate::masking::MaskError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

// --- path enumeration --------------------------------------------------------

/// One input-to-output path: the input it starts at, the hidden node picked
/// in each hidden layer, the product of traversed weights, and the product
/// of the ReLU step gates along the way.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTerm {
    pub input_index: usize,
    pub nodes: Vec<usize>,
    pub weight_product: f64,
    pub gate_product: f64,
}

/// Effective weight matrices (f64) of a dense-only network, plus the layer
/// widths including the input.
fn dense_matrices(net: &Network) -> Result<(Vec<usize>, Vec<Vec<f64>>), OracleError> {
    for desc in &net.spec().layers {
        match desc {
            LayerDesc::Dense { .. } => {}
            LayerDesc::Conv { .. } => return Err(OracleError::NotDense("a conv layer")),
            LayerDesc::MaxPool => return Err(OracleError::NotDense("a pooling layer")),
        }
    }
    let [c, h, w] = net.spec().input_shape;
    let mut widths = vec![c * h * w];
    for desc in &net.spec().layers {
        if let LayerDesc::Dense { units } = desc {
            widths.push(*units);
        }
    }
    let mats = net
        .effective_weights_all()
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    Ok((widths, mats))
}

/// ReLU step gates of every hidden layer, from an f64 reference pass.
fn hidden_gates(widths: &[usize], mats: &[Vec<f64>], x: &[f64]) -> Vec<Vec<f64>> {
    let mut gates: Vec<Vec<f64>> = Vec::new();
    let mut act = x.to_vec();
    for l in 0..mats.len() - 1 {
        let (din, dout) = (widths[l], widths[l + 1]);
        let mut next = vec![0f64; dout];
        for j in 0..dout {
            let mut z = 0f64;
            for i in 0..din {
                z += act[i] * mats[l][i * dout + j];
            }
            next[j] = z;
        }
        gates.push(next.iter().map(|&z| if z > 0.0 { 1.0 } else { 0.0 }).collect());
        for (v, g) in next.iter_mut().zip(gates.last().unwrap().iter()) {
            *v *= g;
        }
        act = next;
    }
    gates
}

fn path_count(widths: &[usize]) -> usize {
    widths[..widths.len() - 1].iter().product()
}

const SUM_LIMIT: usize = 1_000_000;
const ENUMERATE_LIMIT: usize = 100_000;

/// Walks every path with an odometer over (input index, hidden node per
/// hidden layer), calling `visit` with the term. The output node is fixed.
fn walk_paths<F: FnMut(PathTerm)>(
    widths: &[usize],
    mats: &[Vec<f64>],
    gates: &[Vec<f64>],
    out_index: usize,
    mut visit: F,
) {
    let hidden_layers = widths.len() - 2;
    let mut idx = vec![0usize; hidden_layers + 1]; // [input, h1, h2, ...]
    loop {
        let mut wprod = 1f64;
        let mut gprod = 1f64;
        for l in 0..=hidden_layers {
            let from = idx[l];
            let to = if l == hidden_layers {
                out_index
            } else {
                idx[l + 1]
            };
            wprod *= mats[l][from * widths[l + 1] + to];
            if l < hidden_layers {
                gprod *= gates[l][idx[l + 1]];
            }
        }
        visit(PathTerm {
            input_index: idx[0],
            nodes: idx[1..].to_vec(),
            weight_product: wprod,
            gate_product: gprod,
        });
        // odometer increment
        let mut d = 0;
        loop {
            idx[d] += 1;
            if idx[d] < widths[d] {
                break;
            }
            idx[d] = 0;
            d += 1;
            if d > hidden_layers {
                return;
            }
        }
    }
}

/// Output `out_index` computed as the sum over all input-to-output paths of
/// `x_i * (product of weights) * (product of gates)`. Gates are read from a
/// reference forward pass, so this equals the layer-by-layer forward exactly
/// (up to f64 rounding) on any bias-free dense ReLU network.
pub fn path_sum_forward(net: &Network, x: &[f64], out_index: usize) -> Result<f64, OracleError> {
    let (widths, mats) = dense_matrices(net)?;
    assert_eq!(x.len(), widths[0], "input length mismatch");
    assert!(out_index < *widths.last().unwrap(), "output index range");
    let paths = path_count(&widths);
    if paths > SUM_LIMIT {
        return Err(OracleError::TooManyPaths {
            paths,
            limit: SUM_LIMIT,
        });
    }
    let gates = hidden_gates(&widths, &mats, x);
    let mut sum = 0f64;
    walk_paths(&widths, &mats, &gates, out_index, |term| {
        sum += x[term.input_index] * term.weight_product * term.gate_product;
    });
    Ok(sum)
}

/// Materializes every path term for `out_index` (small networks only).
pub fn enumerate_paths(
    net: &Network,
    x: &[f64],
    out_index: usize,
) -> Result<Vec<PathTerm>, OracleError> {
    let (widths, mats) = dense_matrices(net)?;
    let paths = path_count(&widths);
    if paths > ENUMERATE_LIMIT {
        return Err(OracleError::TooManyPaths {
            paths,
            limit: ENUMERATE_LIMIT,
        });
    }
    let gates = hidden_gates(&widths, &mats, x);
    let mut out = Vec::with_capacity(paths);
    walk_paths(&widths, &mats, &gates, out_index, |t| out.push(t));
    Ok(out)
}

/// The factored form for constant-magnitude layers: `prod(|W_l|)` times the
/// sum of `x_i * sign(path) * gate(path)`. Must agree with
/// [`path_sum_forward`] whenever every layer's weights share one magnitude.
pub fn path_sum_factored(net: &Network, x: &[f64], out_index: usize) -> Result<f64, OracleError> {
    let (widths, mats) = dense_matrices(net)?;
    let paths = path_count(&widths);
    if paths > SUM_LIMIT {
        return Err(OracleError::TooManyPaths {
            paths,
            limit: SUM_LIMIT,
        });
    }
    let mut magnitude = 1f64;
    for (l, m) in mats.iter().enumerate() {
        let scale = m.iter().find(|v| **v != 0.0).map_or(0.0, |v| v.abs());
        if m.iter().any(|v| *v != 0.0 && (v.abs() - scale).abs() > 0.0) {
            return Err(OracleError::NotConstantMagnitude(l));
        }
        magnitude *= scale;
    }
    let gates = hidden_gates(&widths, &mats, x);
    let mut signed_sum = 0f64;
    walk_paths(&widths, &mats, &gates, out_index, |term| {
        signed_sum += x[term.input_index] * term.weight_product.signum() * term.gate_product;
    });
    Ok(magnitude * signed_sum)
}

// --- f64 reference network -----------------------------------------------------

enum RefOp {
    Dense {
        w: Vec<f64>,
        din: usize,
        dout: usize,
        relu: bool,
    },
    Conv {
        k: Vec<f64>,
        cin: usize,
        cout: usize,
    },
    Pool,
}

/// Distance to the nearest nondifferentiable point seen during a pass
/// (ReLU pre-activations near zero, near-tied pooling windows) plus a hash
/// of the active pattern: ReLU signs and pool winners. Two evaluations in
/// the same linear piece of the network have equal hashes.
#[derive(Debug, Clone, Copy)]
pub struct KinkMargin {
    pub min_preact_abs: f64,
    pub min_pool_margin: f64,
    pub gate_hash: u64,
}

impl KinkMargin {
    fn fresh() -> KinkMargin {
        KinkMargin {
            min_preact_abs: f64::INFINITY,
            min_pool_margin: f64::INFINITY,
            gate_hash: 0xcbf2_9ce4_8422_2325, // FNV-1a offset basis
        }
    }

    fn note_gate(&mut self, byte: u8) {
        self.gate_hash = (self.gate_hash ^ byte as u64).wrapping_mul(0x100_0000_01b3);
    }

    fn merge(&mut self, other: KinkMargin) {
        self.min_preact_abs = self.min_preact_abs.min(other.min_preact_abs);
        self.min_pool_margin = self.min_pool_margin.min(other.min_pool_margin);
        for byte in other.gate_hash.to_le_bytes() {
            self.note_gate(byte);
        }
    }

    pub fn clear_of(&self, eps: f64) -> bool {
        self.min_preact_abs > eps && self.min_pool_margin > eps
    }
}

/// A layer-by-layer f64 re-implementation of the network forward, built by
/// naive loops (no GEMM, no im2col). Used as the high-precision reference
/// for finite differences and for the path-sum comparison.
pub struct RefNet {
    input_shape: [usize; 3],
    ops: Vec<RefOp>,
}

impl RefNet {
    /// Copies the network's effective weights. In dense mode these are the
    /// weights themselves, so perturbing a slot matches perturbing `w`.
    pub fn from_network(net: &Network) -> RefNet {
        let effs = net.effective_weights_all();
        let mut ops = Vec::new();
        let mut shape = net.spec().input_shape;
        let mut wi = 0;
        let n_weighted = effs.len();
        for desc in &net.spec().layers {
            match *desc {
                LayerDesc::Conv { filters } => {
                    ops.push(RefOp::Conv {
                        k: effs[wi].data().iter().map(|&v| v as f64).collect(),
                        cin: shape[0],
                        cout: filters,
                    });
                    wi += 1;
                    shape[0] = filters;
                }
                LayerDesc::MaxPool => {
                    ops.push(RefOp::Pool);
                    shape[1] /= 2;
                    shape[2] /= 2;
                }
                LayerDesc::Dense { units } => {
                    let din = shape[0] * shape[1] * shape[2];
                    ops.push(RefOp::Dense {
                        w: effs[wi].data().iter().map(|&v| v as f64).collect(),
                        din,
                        dout: units,
                        relu: wi + 1 < n_weighted,
                    });
                    wi += 1;
                    shape = [units, 1, 1];
                }
            }
        }
        RefNet {
            input_shape: net.spec().input_shape,
            ops,
        }
    }

    /// Mutable weight buffer of the `wi`-th weighted layer.
    pub fn weights_mut(&mut self, wi: usize) -> &mut Vec<f64> {
        self.ops
            .iter_mut()
            .filter_map(|op| match op {
                RefOp::Dense { w, .. } => Some(w),
                RefOp::Conv { k, .. } => Some(k),
                RefOp::Pool => None,
            })
            .nth(wi)
            .expect("weighted layer index")
    }

    /// One sample through the network; `x` is the flat `[C, H, W]` volume.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, KinkMargin) {
        let mut act = x.to_vec();
        let [mut c, mut h, mut w] = self.input_shape;
        let mut margin = KinkMargin::fresh();
        for op in &self.ops {
            match op {
                RefOp::Dense {
                    w: mat,
                    din,
                    dout,
                    relu,
                } => {
                    debug_assert_eq!(act.len(), *din);
                    let mut next = vec![0f64; *dout];
                    for (j, nj) in next.iter_mut().enumerate() {
                        let mut z = 0f64;
                        for i in 0..*din {
                            z += act[i] * mat[i * dout + j];
                        }
                        if *relu {
                            margin.min_preact_abs = margin.min_preact_abs.min(z.abs());
                            margin.note_gate((z > 0.0) as u8);
                            z = z.max(0.0);
                        }
                        *nj = z;
                    }
                    act = next;
                    c = *dout;
                    h = 1;
                    w = 1;
                }
                RefOp::Conv { k, cin, cout } => {
                    let mut next = vec![0f64; cout * h * w];
                    for f in 0..*cout {
                        for oy in 0..h {
                            for ox in 0..w {
                                let mut z = 0f64;
                                for ci in 0..*cin {
                                    for ky in 0..3 {
                                        for kx in 0..3 {
                                            let iy = oy as isize + ky as isize - 1;
                                            let ix = ox as isize + kx as isize - 1;
                                            if iy < 0
                                                || ix < 0
                                                || iy >= h as isize
                                                || ix >= w as isize
                                            {
                                                continue;
                                            }
                                            let xv =
                                                act[(ci * h + iy as usize) * w + ix as usize];
                                            let kv = k[((f * cin + ci) * 3 + ky) * 3 + kx];
                                            z += xv * kv;
                                        }
                                    }
                                }
                                margin.min_preact_abs = margin.min_preact_abs.min(z.abs());
                                margin.note_gate((z > 0.0) as u8);
                                next[(f * h + oy) * w + ox] = z.max(0.0);
                            }
                        }
                    }
                    act = next;
                    c = *cout;
                }
                RefOp::Pool => {
                    let (oh, ow) = (h / 2, w / 2);
                    let mut next = vec![0f64; c * oh * ow];
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut vals = [0f64; 4];
                                for (q, v) in vals.iter_mut().enumerate() {
                                    let iy = oy * 2 + q / 2;
                                    let ix = ox * 2 + q % 2;
                                    *v = act[(ci * h + iy) * w + ix];
                                }
                                let best = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                                // routing only matters for an active winner; a
                                // fully clamped window stays zero under small
                                // perturbations (preact margins cover the rest)
                                if best > 0.0 {
                                    let second = vals
                                        .iter()
                                        .cloned()
                                        .filter(|&v| v < best)
                                        .fold(f64::NEG_INFINITY, f64::max);
                                    let gap = if second.is_finite() {
                                        best - second
                                    } else {
                                        0.0 // exact tie across the window
                                    };
                                    margin.min_pool_margin = margin.min_pool_margin.min(gap);
                                    let winner =
                                        vals.iter().position(|&v| v == best).unwrap() as u8;
                                    margin.note_gate(winner);
                                } else {
                                    margin.note_gate(4); // dead window
                                }
                                next[(ci * oh + oy) * ow + ox] = best;
                            }
                        }
                    }
                    act = next;
                    h = oh;
                    w = ow;
                }
            }
        }
        (act, margin)
    }

    /// Mean cross-entropy over a batch of flat samples.
    pub fn batch_loss(&self, xs: &[Vec<f64>], ys: &[u8]) -> (f64, KinkMargin) {
        let mut total = 0f64;
        let mut margin = KinkMargin::fresh();
        for (x, &y) in xs.iter().zip(ys) {
            let (logits, m) = self.forward(x);
            margin.merge(m);
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - logits[y as usize];
        }
        (total / xs.len() as f64, margin)
    }
}

/// Flattens a `[B, C, H, W]` tensor into per-sample f64 vectors.
pub fn batch_to_f64(images: &Tensor) -> Vec<Vec<f64>> {
    let b = images.shape()[0];
    let row = images.len() / b;
    (0..b)
        .map(|i| {
            images.data()[i * row..(i + 1) * row]
                .iter()
                .map(|&v| v as f64)
                .collect()
        })
        .collect()
}

// --- finite differences ----------------------------------------------------------

pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Central finite differences of `f` at `x0` against `analytic`, on the
/// chosen coordinates, with per-coordinate step `h_scale * max(1, |x_i|)`.
///
/// `f` returns the value plus a smoothness certificate (the active gate
/// pattern for networks, any constant for smooth functions), or `None` to
/// veto an evaluation that sits too close to a kink. A coordinate counts
/// only when both stencil endpoints evaluate with equal certificates —
/// otherwise the stencil straddles a nondifferentiable point and the
/// coordinate is skipped, not failed. The error is relative with `floor`
/// as the denominator's lower bound, so coordinates whose gradient sits
/// below the caller's noise floor are judged on the absolute scale.
pub fn fd_gradient_check<F: FnMut(&[f64]) -> Option<(f64, u64)>>(
    mut f: F,
    x0: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h_scale: f64,
    floor: f64,
) -> FdReport {
    assert_eq!(x0.len(), analytic.len());
    let mut x = x0.to_vec();
    let mut report = FdReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    for &i in coords {
        let h = h_scale * x0[i].abs().max(1.0);
        x[i] = x0[i] + h;
        let fp = f(&x);
        x[i] = x0[i] - h;
        let fm = f(&x);
        x[i] = x0[i];
        let (fp, fm) = match (fp, fm) {
            (Some((a, ca)), Some((b, cb))) if ca == cb => (a, b),
            _ => {
                report.skipped += 1;
                continue;
            }
        };
        let fd = (fp - fm) / (2.0 * h);
        let denom = fd.abs().max(analytic[i].abs()).max(floor);
        report.max_rel_err = report.max_rel_err.max((fd - analytic[i]).abs() / denom);
        report.checked += 1;
    }
    report
}

/// Spec'd exclusion radius around ReLU kinks and pooling ties.
pub const KINK_EPS: f64 = 1e-6;

/// Finite-difference check of dense-mode backprop on one weighted layer:
/// analytic gradients from the production backward, numeric ones from the
/// f64 reference network, `coords` subsampled by the caller.
pub fn check_backward_against_fd(
    net: &Network,
    images: &Tensor,
    labels: &[u8],
    layer: usize,
    coords: &[usize],
) -> Result<FdReport, OracleError> {
    assert_eq!(net.mode(), Mode::Dense, "weight-space FD needs dense mode");
    let (_, cache) = net.forward_train(images)?;
    let logits = net.forward(images)?;
    let (_, logit_grad) = crate::train::softmax_cross_entropy(&logits, labels)?;
    let grads = net.backward(&cache, &logit_grad)?;
    let analytic: Vec<f64> = grads[layer].data().iter().map(|&v| v as f64).collect();
    let gmax = analytic.iter().fold(0f64, |a, v| a.max(v.abs()));

    let mut refnet = RefNet::from_network(net);
    let xs = batch_to_f64(images);
    let x0 = refnet.weights_mut(layer).clone();
    let f = |w: &[f64]| {
        refnet.weights_mut(layer).copy_from_slice(w);
        let (loss, margin) = refnet.batch_loss(&xs, labels);
        margin
            .clear_of(KINK_EPS)
            .then_some((loss, margin.gate_hash))
    };
    // the f32 backward carries ~1e-7 absolute noise; judge coordinates
    // whose gradient is far below the layer's scale on the absolute scale
    let floor = (gmax * 1e-2).max(1e-10);
    Ok(fd_gradient_check(f, &x0, &analytic, coords, 1e-4, floor))
}

// --- exhaustive mask search ---------------------------------------------------------

pub const MASK_SEARCH_LIMIT: usize = 20;

pub struct MaskSearchResult {
    pub best_mask: u64,
    pub best_loss: f64,
    pub masks_tried: u64,
}

/// Writes `mask` into the network's scores: bit b set -> score +0.1 (keep),
/// clear -> -0.1 (prune). Bit order is the `params()` iteration order,
/// row-major within each layer.
pub fn apply_mask(net: &mut Network, mask: u64) {
    let mut b = 0;
    for p in net.params_mut() {
        for t in p.trainable_mut().data_mut() {
            *t = if mask >> b & 1 == 1 { 0.1 } else { -0.1 };
            b += 1;
        }
    }
}

/// Tries every one of the 2^M masks of a prune-mode network (M <= 20) and
/// returns the one minimizing cross-entropy on the given data. A dense-mode
/// network has no mask bits; the search degenerates to its own loss.
pub fn exhaustive_mask_search(
    net: &Network,
    images: &Tensor,
    labels: &[u8],
) -> Result<MaskSearchResult, OracleError> {
    if net.mode() == Mode::Dense {
        let logits = net.forward(images)?;
        return Ok(MaskSearchResult {
            best_mask: 0,
            best_loss: loss_free(&logits, labels)?,
            masks_tried: 1,
        });
    }
    if net.mode() != Mode::Prune {
        return Err(OracleError::NotPruneMode(net.mode()));
    }
    let m = net.count_params();
    if m > MASK_SEARCH_LIMIT {
        return Err(OracleError::TooManyMaskBits {
            m,
            limit: MASK_SEARCH_LIMIT,
        });
    }
    let mut work = net.to_unit_signs()?; // structure clone; weights replaced below
    // keep the original weights, not unit signs: rebuild from the source net
    let src: Vec<Tensor> = net.params().map(|p| p.weights().clone()).collect();
    for (p, w) in work.params_mut().zip(src) {
        *p = crate::masking::MaskedParam::masked(w, p.scores().clone(), Mode::Prune)?;
    }
    let mut best_mask = 0u64;
    let mut best_loss = f64::INFINITY;
    let total = 1u64 << m;
    for mask in 0..total {
        apply_mask(&mut work, mask);
        let logits = work.forward(images)?;
        let loss = loss_free(&logits, labels)?;
        if loss < best_loss {
            best_loss = loss;
            best_mask = mask;
        }
    }
    Ok(MaskSearchResult {
        best_mask,
        best_loss,
        masks_tried: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{InitKind, InitSpec};
    use crate::layers::NetworkSpec;
    use crate::masking::MaskedParam;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn net_with_weights(
        widths_in: usize,
        widths: &[usize],
        mode: Mode,
        seed: u64,
    ) -> Network {
        let spec = NetworkSpec::dense_chain("t", widths_in, widths);
        let init = InitSpec::new(InitKind::SignedHeConstant, seed);
        Network::new(&spec, mode, &init).unwrap()
    }

    fn set_all_weights(net: &mut Network, value: f32) {
        let replacements: Vec<MaskedParam> = net
            .params()
            .map(|p| {
                let w = Tensor::filled(p.weights().shape(), value);
                match p.mode() {
                    Mode::Dense => MaskedParam::dense(w),
                    m => MaskedParam::masked(w, p.scores().clone(), m).unwrap(),
                }
            })
            .collect();
        for (p, new) in net.params_mut().zip(replacements) {
            *p = new;
        }
    }

    #[test]
    fn all_ones_2222_net_sums_to_eight() {
        let mut net = net_with_weights(2, &[2, 2, 2], Mode::Dense, 1);
        set_all_weights(&mut net, 1.0);
        let got = path_sum_forward(&net, &[1.0, 1.0], 0).unwrap();
        assert_eq!(got, 8.0);
        let paths = enumerate_paths(&net, &[1.0, 1.0], 0).unwrap();
        assert_eq!(paths.len(), 8);
        assert!(paths
            .iter()
            .all(|p| p.weight_product == 1.0 && p.gate_product == 1.0));
    }

    #[test]
    fn dead_hidden_node_kills_its_paths() {
        // 2-2-1: node 1 of the hidden layer gets a negative pre-activation
        let mut net = net_with_weights(2, &[2, 1], Mode::Dense, 2);
        let w1 = Tensor::new(vec![2, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let w2 = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let mut params = net.params_mut();
        *params.next().unwrap() = MaskedParam::dense(w1);
        *params.next().unwrap() = MaskedParam::dense(w2);
        drop(params);
        let x = [0.5f64, 0.25];
        let paths = enumerate_paths(&net, &x, 0).unwrap();
        for p in &paths {
            if p.nodes[0] == 1 {
                assert_eq!(p.gate_product, 0.0);
            } else {
                assert_eq!(p.gate_product, 1.0);
            }
        }
        // the surviving node passes x0 + x1 through weight 1
        let sum = path_sum_forward(&net, &x, 0).unwrap();
        assert!((sum - 0.75).abs() < 1e-12);
    }

    #[test]
    fn path_sum_matches_reference_forward_on_random_nets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..100 {
            let depth = rng.gen_range(1..=3);
            let widths: Vec<usize> = (0..depth + 1).map(|_| rng.gen_range(2..=5)).collect();
            let d0 = rng.gen_range(2..=5);
            let mode = [Mode::Dense, Mode::Prune, Mode::Flip][case % 3];
            let mut net = net_with_weights(d0, &widths, mode, case as u64);
            if mode != Mode::Dense {
                // scatter some sign changes into the scores
                for p in net.params_mut() {
                    for (i, t) in p.trainable_mut().data_mut().iter_mut().enumerate() {
                        if i % 3 == 0 {
                            *t = -*t;
                        }
                    }
                }
            }
            let x: Vec<f64> = (0..d0).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let refnet = RefNet::from_network(&net);
            let (want, _) = refnet.forward(&x);
            for out in 0..*widths.last().unwrap() {
                let got = path_sum_forward(&net, &x, out).unwrap();
                assert!(
                    (got - want[out]).abs() < 1e-6,
                    "case {case} out {out}: {got} vs {}",
                    want[out]
                );
            }
            // cross-check the production f32 forward at looser tolerance
            let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
            let xt = Tensor::new(vec![1, 1, 1, d0], xf).unwrap();
            let f32_out = net.forward(&xt).unwrap();
            for (a, b) in f32_out.data().iter().zip(&want) {
                assert!((*a as f64 - b).abs() / (1.0 + b.abs()) < 1e-4);
            }
        }
    }

    #[test]
    fn factored_form_agrees_for_constant_magnitudes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for case in 0..20 {
            let net = net_with_weights(3, &[4, 3, 2], Mode::Prune, 100 + case);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for out in 0..2 {
                let plain = path_sum_forward(&net, &x, out).unwrap();
                let factored = path_sum_factored(&net, &x, out).unwrap();
                assert!(
                    (plain - factored).abs() < 1e-6,
                    "case {case}: {plain} vs {factored}"
                );
            }
        }
    }

    #[test]
    fn factored_form_rejects_varying_magnitudes() {
        let net = {
            let spec = NetworkSpec::dense_chain("g", 3, &[3, 2]);
            let init = InitSpec::new(InitKind::GlorotNormal, 5);
            Network::new(&spec, Mode::Dense, &init).unwrap()
        };
        assert!(matches!(
            path_sum_factored(&net, &[0.1, 0.2, 0.3], 0),
            Err(OracleError::NotConstantMagnitude(0))
        ));
    }

    #[test]
    fn flipping_one_weight_flips_exactly_its_paths() {
        let mut net = net_with_weights(3, &[3, 3, 2], Mode::Dense, 6);
        let x = [0.4f64, -0.2, 0.9];
        let before = enumerate_paths(&net, &x, 1).unwrap();
        // flip weight [a=1, b=2] of layer 1 (the middle 3x3 matrix)
        {
            let p = net.params_mut().nth(1).unwrap();
            let w = Tensor::new(
                p.weights().shape().to_vec(),
                p.weights()
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| if i == 1 * 3 + 2 { -v } else { v })
                    .collect(),
            )
            .unwrap();
            *p = MaskedParam::dense(w);
        }
        let after = enumerate_paths(&net, &x, 1).unwrap();
        assert_eq!(before.len(), after.len());
        let mut flipped = 0;
        for (b, a) in before.iter().zip(&after) {
            let traverses = b.nodes[0] == 1 && b.nodes[1] == 2;
            if traverses {
                assert_eq!(a.weight_product, -b.weight_product);
                flipped += 1;
            } else {
                assert_eq!(a.weight_product, b.weight_product);
            }
        }
        // paths through a fixed middle edge: one per (input, output-fixed) = 3
        assert_eq!(flipped, 3);
    }

    #[test]
    fn enumeration_limit_is_enforced() {
        let net = net_with_weights(100, &[101, 100, 2], Mode::Dense, 7);
        let x = vec![0.0; 100];
        assert!(matches!(
            path_sum_forward(&net, &x, 0),
            Err(OracleError::TooManyPaths {
                paths: 1_010_000,
                limit: 1_000_000,
            })
        ));
    }

    #[test]
    fn fd_on_a_quadratic_is_tight() {
        let x0 = [1.0f64, 2.0];
        let analytic = [2.0f64, 4.0];
        let f = |x: &[f64]| Some((x.iter().map(|v| v * v).sum::<f64>(), 0));
        let report = fd_gradient_check(f, &x0, &analytic, &[0, 1], 1e-4, 1e-9);
        assert_eq!(report.checked, 2);
        assert!(report.max_rel_err <= 1e-6, "{}", report.max_rel_err);
    }

    fn random_batch(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn dense_micro_backprop_matches_fd() {
        let spec = NetworkSpec::dense_chain("micro", 12, &[6, 4, 10]);
        let init = InitSpec::new(InitKind::GlorotNormal, 8);
        let net = Network::new(&spec, Mode::Dense, &init).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let images = random_batch(&mut rng, &[8, 1, 1, 12]);
        let labels: Vec<u8> = (0..8).map(|_| rng.gen_range(0..10)).collect();
        for layer in 0..3 {
            let n = net.params().nth(layer).unwrap().weights().len();
            let coords: Vec<usize> = (0..n).step_by((n / 24).max(1)).collect();
            let report =
                check_backward_against_fd(&net, &images, &labels, layer, &coords).unwrap();
            assert!(report.checked > 10);
            assert!(
                report.max_rel_err <= 1e-3,
                "layer {layer}: {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn conv_micro_backprop_matches_fd() {
        let spec = NetworkSpec {
            name: "conv-micro".to_string(),
            input_shape: [2, 6, 6],
            layers: vec![
                LayerDesc::Conv { filters: 3 },
                LayerDesc::Conv { filters: 3 },
                LayerDesc::MaxPool,
                LayerDesc::Dense { units: 8 },
                LayerDesc::Dense { units: 10 },
            ],
        };
        let init = InitSpec::new(InitKind::HeNormal, 10);
        let net = Network::new(&spec, Mode::Dense, &init).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let images = random_batch(&mut rng, &[4, 2, 6, 6]);
        let labels: Vec<u8> = (0..4).map(|_| rng.gen_range(0..10)).collect();
        for layer in 0..4 {
            let n = net.params().nth(layer).unwrap().weights().len();
            let coords: Vec<usize> = (0..n).step_by((n / 16).max(1)).collect();
            let report =
                check_backward_against_fd(&net, &images, &labels, layer, &coords).unwrap();
            assert!(report.checked > 5, "layer {layer} skipped everything");
            assert!(
                report.max_rel_err <= 1e-3,
                "layer {layer}: {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn fd_documents_the_ste_bias() {
        // L = (w m(t) x)^2 with w=2, x=1, t=0.5: the STE reports dL/dt = 8,
        // but m is piecewise constant so the true derivative is 0
        let spec = NetworkSpec::dense_chain("scalar", 1, &[1]);
        let init = InitSpec::new(InitKind::SignedHeConstant, 12);
        let mut net = Network::new(&spec, Mode::Prune, &init).unwrap();
        {
            let p = net.params_mut().next().unwrap();
            *p = MaskedParam::masked(
                Tensor::new(vec![1, 1], vec![2.0]).unwrap(),
                Tensor::new(vec![1, 1], vec![0.5]).unwrap(),
                Mode::Prune,
            )
            .unwrap();
        }
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let (logits, cache) = net.forward_train(&x).unwrap();
        let grad = Tensor::new(vec![1, 1], vec![2.0 * logits.data()[0]]).unwrap();
        let ste = net.backward(&cache, &grad).unwrap()[0].data()[0];
        assert_eq!(ste, 8.0);

        // FD through the hard threshold at t=0.5 sees a constant function
        let f = |t: &[f64]| {
            let m = if t[0] > 0.0 { 1.0 } else { 0.0 };
            Some(((2.0 * m * 1.0f64).powi(2), 0))
        };
        let report = fd_gradient_check(f, &[0.5], &[ste as f64], &[0], 1e-4, 1e-9);
        assert!(report.max_rel_err > 0.99, "{}", report.max_rel_err);
    }

    #[test]
    fn exhaustive_search_on_dense_mode_returns_the_plain_loss() {
        let net = net_with_weights(3, &[2, 2], Mode::Dense, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let images = random_batch(&mut rng, &[6, 1, 1, 3]);
        let labels = vec![0u8, 1, 0, 1, 0, 1];
        let res = exhaustive_mask_search(&net, &images, &labels).unwrap();
        assert_eq!(res.masks_tried, 1);
        let logits = net.forward(&images).unwrap();
        assert_eq!(res.best_loss, loss_free(&logits, &labels).unwrap());
    }

    #[test]
    fn exhaustive_search_prunes_a_corrupted_weight() {
        // single 2x2 layer whose weight [0,1] was corrupted to 50; any mask
        // keeping it predicts class 1 with ~45-logit confidence on the A
        // samples (label 0), so only masks cutting bit 1 are in the running,
        // and among those the labels are built to make "everything except
        // bit 1" the strict optimum
        let mut net = net_with_weights(2, &[2], Mode::Prune, 15);
        {
            let p = net.params_mut().next().unwrap();
            *p = MaskedParam::masked(
                Tensor::new(vec![2, 2], vec![3.0, 50.0, -3.0, 3.0]).unwrap(),
                p.scores().clone(),
                Mode::Prune,
            )
            .unwrap();
        }
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for (x0, x1, y) in [(0.9f32, 0.1f32, 0u8), (0.2, 0.9, 1), (0.8, 0.55, 1)] {
            for _ in 0..8 {
                pixels.extend_from_slice(&[x0, x1]);
                labels.push(y);
            }
        }
        let images = Tensor::new(vec![24, 1, 1, 2], pixels).unwrap();

        let res = exhaustive_mask_search(&net, &images, &labels).unwrap();
        assert_eq!(res.masks_tried, 16);
        assert_eq!(
            res.best_mask, 0b1101,
            "best mask should keep everything except the corrupted bit 1"
        );
    }

    #[test]
    fn exhaustive_search_rejects_large_and_flip_nets() {
        let net = net_with_weights(8, &[8, 2], Mode::Prune, 17);
        let images = Tensor::zeros(&[1, 1, 1, 8]);
        assert!(matches!(
            exhaustive_mask_search(&net, &images, &[0]),
            Err(OracleError::TooManyMaskBits { m: 80, limit: 20 })
        ));
        let net = net_with_weights(2, &[2, 2], Mode::Flip, 18);
        let images = Tensor::zeros(&[1, 1, 1, 2]);
        assert!(matches!(
            exhaustive_mask_search(&net, &images, &[0]),
            Err(OracleError::NotPruneMode(Mode::Flip))
        ));
    }
}
