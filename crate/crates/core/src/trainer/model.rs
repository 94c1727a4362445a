//! Mixture-of-experts regression model with analytic gradients.
//!
//! Parameters are exposed as one flat vector in a fixed order: prototypes
//! (`G·d_in`), expert vectors (`E·d_in`), then the experts. Dense experts are
//! each `d_out·d_in`; compressed experts are the `G` bases followed by `A_i`
//! and `B_i` of every unpruned expert. The router block comes first so it can
//! be frozen as a prefix.
//!
//! Gates are the selected experts' scores renormalized over the selection.
//! Because the renormalization cancels every shared softmax denominator, the
//! gate of selected expert `t` is a softmax over the selection of
//!
//! * flat: `ℓ_i`
//! * hierarchical: `z_g/T + ℓ_i − logsumexp_{j∈g} ℓ_j`
//!
//! and the backward pass differentiates that form.

use serde::{Deserialize, Serialize};

use crate::clustering::GroupAssignment;
use crate::compression::GroupedParams;
use crate::error::{MoeError, Result};
use crate::expert_bank::Centroid;
use crate::numerics::{Matrix, MulCounter};
use crate::routing::{flat_route, route_hierarchical, FlatRoute, HierRoute, RouterParams};

#[derive(Debug, Clone, PartialEq)]
pub enum ExpertStore {
    Dense(Vec<Matrix>),
    Compressed(GroupedParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterMode {
    Flat,
    Hierarchical,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Route {
    Flat(FlatRoute),
    Hier(HierRoute),
}

impl Route {
    pub fn experts(&self) -> &[usize] {
        match self {
            Route::Flat(r) => &r.experts,
            Route::Hier(r) => &r.experts,
        }
    }

    pub fn gates(&self) -> &[f64] {
        match self {
            Route::Flat(r) => &r.gates,
            Route::Hier(r) => &r.gates,
        }
    }

    pub fn groups(&self) -> &[usize] {
        match self {
            Route::Flat(_) => &[],
            Route::Hier(r) => &r.groups,
        }
    }
}

/// Intermediates kept by [`MoeModel::forward`] for [`MoeModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub x: Vec<f64>,
    pub route: Route,
    /// Output of each selected expert, in selection order.
    pub outputs: Vec<Vec<f64>>,
    /// `B_iᵀ·x` of each selected compressed, unpruned expert.
    hidden: Vec<Option<Vec<f64>>>,
    pub pred: Vec<f64>,
    param_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    pub experts: ExpertStore,
    pub router: RouterParams,
    pub assignment: GroupAssignment,
    pub mode: RouterMode,
    pub tanh_output: bool,
    pub centroids: Vec<Centroid>,
}

/// Mean squared error over output coordinates.
pub fn sample_loss(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

/// Gradient of [`sample_loss`] with respect to `pred`.
pub fn loss_grad(pred: &[f64], target: &[f64]) -> Vec<f64> {
    let n = pred.len() as f64;
    pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect()
}

impl MoeModel {
    pub fn d_in(&self) -> usize {
        self.router.d_in()
    }

    pub fn d_out(&self) -> usize {
        match &self.experts {
            ExpertStore::Dense(w) => w[0].rows(),
            ExpertStore::Compressed(gp) => gp.d_out(),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.router.expert_vectors.rows()
    }

    pub fn is_compressed(&self) -> bool {
        matches!(self.experts, ExpertStore::Compressed(_))
    }

    pub fn grouped(&self) -> Option<&GroupedParams> {
        match &self.experts {
            ExpertStore::Compressed(gp) => Some(gp),
            ExpertStore::Dense(_) => None,
        }
    }

    pub fn expert_weight(&self, i: usize) -> Matrix {
        match &self.experts {
            ExpertStore::Dense(w) => w[i].clone(),
            ExpertStore::Compressed(gp) => gp.expert_weight(i),
        }
    }

    pub fn expert_weights(&self) -> Vec<Matrix> {
        (0..self.num_experts()).map(|i| self.expert_weight(i)).collect()
    }

    /// Elements held by the experts (bases and factors when compressed).
    pub fn stored_expert_elements(&self) -> usize {
        match &self.experts {
            ExpertStore::Dense(w) => w.iter().map(Matrix::len).sum(),
            ExpertStore::Compressed(gp) => gp.stored_elements(),
        }
    }

    pub fn uncompressed_expert_elements(&self) -> usize {
        self.num_experts() * self.d_in() * self.d_out()
    }

    pub fn router_len(&self) -> usize {
        self.router.element_count()
    }

    pub fn param_len(&self) -> usize {
        self.router_len() + self.stored_expert_elements()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        out.extend_from_slice(self.router.prototypes.as_slice());
        out.extend_from_slice(self.router.expert_vectors.as_slice());
        match &self.experts {
            ExpertStore::Dense(w) => w.iter().for_each(|m| out.extend_from_slice(m.as_slice())),
            ExpertStore::Compressed(gp) => {
                for g in 0..gp.num_groups() {
                    out.extend_from_slice(gp.base(g).as_slice());
                }
                for i in 0..gp.num_experts() {
                    if let Some(f) = gp.residual(i) {
                        out.extend_from_slice(f.a.as_slice());
                        out.extend_from_slice(f.b.as_slice());
                    }
                }
            }
        }
        out
    }

    pub fn load_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_len() {
            return Err(MoeError::shape(format!("{} values for {} parameters", params.len(), self.param_len())));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(MoeError::NonFinite("model parameters".into()));
        }
        let mut at = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&params[at..at + dst.len()]);
            at += dst.len();
        };
        take(self.router.prototypes.as_mut_slice());
        take(self.router.expert_vectors.as_mut_slice());
        match &mut self.experts {
            ExpertStore::Dense(w) => w.iter_mut().for_each(|m| take(m.as_mut_slice())),
            ExpertStore::Compressed(gp) => {
                for g in 0..gp.num_groups() {
                    take(gp.base_mut(g).as_mut_slice());
                }
                for i in 0..gp.num_experts() {
                    if let Some(f) = gp.residual_mut(i) {
                        take(f.a.as_mut_slice());
                        take(f.b.as_mut_slice());
                    }
                }
            }
        }
        Ok(())
    }

    /// Offsets of each expert's parameters inside the flat vector: the dense
    /// matrix, or (base, Some((A, B))) when compressed.
    fn expert_offsets(&self) -> Vec<(usize, Option<(usize, usize)>)> {
        let mut at = self.router_len();
        match &self.experts {
            ExpertStore::Dense(w) => w
                .iter()
                .map(|m| {
                    let o = at;
                    at += m.len();
                    (o, None)
                })
                .collect(),
            ExpertStore::Compressed(gp) => {
                let base_len = gp.d_out() * gp.d_in();
                let bases: Vec<usize> = (0..gp.num_groups()).map(|g| at + g * base_len).collect();
                at += gp.num_groups() * base_len;
                (0..gp.num_experts())
                    .map(|i| {
                        let base = bases[gp.assignment().group_of(i)];
                        let ab = gp.residual(i).map(|f| {
                            let a = at;
                            let b = a + f.a.len();
                            at = b + f.b.len();
                            (a, b)
                        });
                        (base, ab)
                    })
                    .collect()
            }
        }
    }

    pub fn route(&self, x: &[f64], counter: &mut MulCounter) -> Result<Route> {
        Ok(match self.mode {
            RouterMode::Flat => Route::Flat(flat_route(x, &self.router.expert_vectors, self.router.k, counter)?),
            RouterMode::Hierarchical => Route::Hier(route_hierarchical(x, &self.router, &self.assignment, counter)?),
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardCache> {
        if x.len() != self.d_in() {
            return Err(MoeError::shape(format!("input of length {} for d_in {}", x.len(), self.d_in())));
        }
        let route = self.route(x, &mut MulCounter::default())?;
        let d_out = self.d_out();
        let mut outputs = Vec::with_capacity(route.experts().len());
        let mut hidden = Vec::with_capacity(route.experts().len());
        match &self.experts {
            ExpertStore::Dense(w) => {
                for &i in route.experts() {
                    outputs.push(w[i].matvec(x)?);
                    hidden.push(None);
                }
            }
            ExpertStore::Compressed(gp) => {
                let mut shared: Vec<Option<Vec<f64>>> = vec![None; gp.num_groups()];
                for &i in route.experts() {
                    let g = gp.assignment().group_of(i);
                    if shared[g].is_none() {
                        shared[g] = Some(gp.base(g).matvec(x)?);
                    }
                    let base_out = shared[g].as_ref().expect("filled above");
                    match gp.residual(i) {
                        Some(f) => {
                            let h = f.b.matvec_transposed(x)?;
                            let delta = f.a.matvec(&h)?;
                            outputs.push(base_out.iter().zip(delta).map(|(s, d)| s + d).collect());
                            hidden.push(Some(h));
                        }
                        None => {
                            outputs.push(base_out.clone());
                            hidden.push(None);
                        }
                    }
                }
            }
        }
        let mut s = vec![0.0; d_out];
        for (y, &gate) in outputs.iter().zip(route.gates()) {
            s.iter_mut().zip(y).for_each(|(acc, v)| *acc += gate * v);
        }
        let pred = if self.tanh_output { s.iter().map(|v| v.tanh()).collect() } else { s };
        Ok(ForwardCache { x: x.to_vec(), route, outputs, hidden, pred, param_len: self.param_len() })
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.pred)
    }

    /// Adds the gradient of `dpred·pred` with respect to every parameter into
    /// `grads` (flat layout).
    pub fn backward(&self, cache: &ForwardCache, dpred: &[f64], grads: &mut [f64]) -> Result<()> {
        if cache.param_len != self.param_len() || grads.len() != self.param_len() {
            return Err(MoeError::shape("forward cache or gradient buffer does not match the model"));
        }
        if dpred.len() != cache.pred.len() {
            return Err(MoeError::shape("loss gradient length differs from prediction"));
        }
        let x = &cache.x;
        let d_in = x.len();
        let ds: Vec<f64> = if self.tanh_output {
            dpred.iter().zip(&cache.pred).map(|(d, p)| d * (1.0 - p * p)).collect()
        } else {
            dpred.to_vec()
        };
        let experts = cache.route.experts();
        let gates = cache.route.gates();
        let offsets = self.expert_offsets();

        let mut dgate = Vec::with_capacity(experts.len());
        for (t, &i) in experts.iter().enumerate() {
            let y = &cache.outputs[t];
            dgate.push(ds.iter().zip(y).map(|(a, b)| a * b).sum::<f64>());
            let dy: Vec<f64> = ds.iter().map(|v| gates[t] * v).collect();
            let (w_off, ab) = offsets[i];
            add_outer(&mut grads[w_off..], &dy, x);
            if let (Some((a_off, b_off)), Some(h), Some(f)) =
                (ab, &cache.hidden[t], self.grouped().and_then(|gp| gp.residual(i)))
            {
                add_outer(&mut grads[a_off..], &dy, h);
                let q = f.a.matvec_transposed(&dy)?;
                add_outer(&mut grads[b_off..], x, &q);
            }
        }

        let mean: f64 = gates.iter().zip(&dgate).map(|(g, d)| g * d).sum();
        let dscore: Vec<f64> = gates.iter().zip(&dgate).map(|(g, d)| g * (d - mean)).collect();
        let proto_len = self.router.prototypes.len();
        let mut add_vector_grad = |row_off: usize, coeff: f64| {
            if coeff != 0.0 {
                grads[row_off..row_off + d_in].iter_mut().zip(x).for_each(|(g, xv)| *g += coeff * xv);
            }
        };
        match &cache.route {
            Route::Flat(_) => {
                for (t, &i) in experts.iter().enumerate() {
                    add_vector_grad(proto_len + i * d_in, dscore[t]);
                }
            }
            Route::Hier(h) => {
                for (slot, &g) in h.groups.iter().enumerate() {
                    let in_group: f64 = experts
                        .iter()
                        .zip(&dscore)
                        .filter(|(&i, _)| self.assignment.group_of(i) == g)
                        .map(|(_, d)| d)
                        .sum();
                    add_vector_grad(g * d_in, in_group / self.router.temperature);
                    for (&j, &p) in self.assignment.members(g).iter().zip(&h.member_probs[slot]) {
                        let own = experts.iter().position(|&i| i == j).map_or(0.0, |t| dscore[t]);
                        add_vector_grad(proto_len + j * d_in, own - p * in_group);
                    }
                }
            }
        }
        Ok(())
    }

    /// Loss and flat gradient of one sample.
    pub fn loss_and_grad(&self, x: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
        let cache = self.forward(x)?;
        let mut grads = vec![0.0; self.param_len()];
        self.backward(&cache, &loss_grad(&cache.pred, y), &mut grads)?;
        Ok((sample_loss(&cache.pred, y), grads))
    }
}

/// `dst[a·cols + b] += u[a]·v[b]` over a row-major `u.len() × v.len()` block.
fn add_outer(dst: &mut [f64], u: &[f64], v: &[f64]) {
    let cols = v.len();
    for (a, &ua) in u.iter().enumerate() {
        if ua == 0.0 {
            continue;
        }
        for (d, &vb) in dst[a * cols..(a + 1) * cols].iter_mut().zip(v) {
            *d += ua * vb;
        }
    }
}
