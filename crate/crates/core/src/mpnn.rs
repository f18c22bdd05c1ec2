//! Message-passing backflow network with particle attention.
//!
//! The forward pass works on [`Jets`]. In derivative mode the layer-0 edge
//! tensors carry only the three local derivatives with respect to the pair
//! displacement `r_ij`; they are expanded to the full `3N` coordinate set at
//! the first all-to-all contraction (the attention sum), which keeps the
//! cost of the first step close to that of a value-only pass.

use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{ParticleConfiguration, SimulationCell, Spin};
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::nn::{gelu_jet, matrix_backward_params, normal, Jets, LayerSpec, Mlp, MlpCache};

/// Number of layer-0 edge features: 6 Fourier components, the periodic
/// distance surrogate and the spin product.
pub const EDGE_FEATURES: usize = 8;

/// Size of the single-particle input of the orbital factor network:
/// real and imaginary parts of the backflow displacement.
pub const JASTROW_COORD_INPUTS: usize = 6;
/// Size of the orbital quantum-number encoding.
pub const JASTROW_ORBITAL_INPUTS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Message-passing iterations `T`.
    pub steps: usize,
    pub embedding_dim: usize,
    pub node_hidden: usize,
    pub edge_hidden: usize,
    pub mlp_width: usize,
    pub mlp_hidden_layers: usize,
    pub jastrow_width: usize,
    /// Typical size of the initial backflow displacement.
    pub output_init_scale: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            steps: 1,
            embedding_dim: 16,
            node_hidden: 32,
            edge_hidden: 32,
            mlp_width: 32,
            mlp_hidden_layers: 1,
            jastrow_width: 32,
            output_init_scale: 1e-2,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn node_dim(&self) -> usize {
        self.embedding_dim + self.node_hidden
    }

    pub fn edge_dim(&self) -> usize {
        EDGE_FEATURES + self.edge_hidden
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embedding_dim", self.embedding_dim),
            ("node_hidden", self.node_hidden),
            ("edge_hidden", self.edge_hidden),
            ("mlp_width", self.mlp_width),
            ("jastrow_width", self.jastrow_width),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("network.{name} must be positive")));
            }
        }
        if !(self.output_init_scale.is_finite() && self.output_init_scale >= 0.0) {
            return Err(Error::Config("network.output_init_scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named slices of the flat parameter vector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let offset = self.total;
        let e = ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
        };
        self.total += e.len();
        self.entries.push(e);
        offset
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    fn mlp(&mut self, prefix: &str, inp: usize, width: usize, hidden: usize, out: usize) -> Mlp {
        let mut layers = Vec::with_capacity(hidden + 1);
        let mut d = inp;
        for k in 0..=hidden {
            let o = if k == hidden { out } else { width };
            let w = self.push(format!("{prefix}.{k}.weight"), &[o, d]);
            let b = self.push(format!("{prefix}.{k}.bias"), &[o]);
            layers.push(LayerSpec { w, b, inp: d, out: o });
            d = o;
        }
        Mlp { layers }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLayout {
    pub wq: usize,
    pub wk: usize,
    pub phi: Mlp,
    pub f: Mlp,
    pub f_edge: Mlp,
}

/// Shapes and offsets of every parameter block. Independent of `N`.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub config: NetworkConfig,
    pub layout: ParamLayout,
    pub embedding: usize,
    pub node_h0: usize,
    pub edge_h0: usize,
    pub steps: Vec<StepLayout>,
    pub w_re: usize,
    pub w_im: usize,
    pub jastrow: Mlp,
    pub alpha: Option<usize>,
}

impl Architecture {
    pub fn new(config: &NetworkConfig, gaussian_width: bool) -> Result<Self> {
        config.validate()?;
        let c = config;
        let (d1, d2) = (c.node_dim(), c.edge_dim());
        let mut layout = ParamLayout::default();
        let embedding = layout.push("embedding", &[c.embedding_dim]);
        let node_h0 = layout.push("node_h0", &[c.node_hidden]);
        let edge_h0 = layout.push("edge_h0", &[c.edge_hidden]);
        let mut steps = Vec::with_capacity(c.steps);
        for t in 0..c.steps {
            let wq = layout.push(format!("step{t}.w_q"), &[d2, d2]);
            let wk = layout.push(format!("step{t}.w_k"), &[d2, d2]);
            let phi = layout.mlp(&format!("step{t}.phi"), d2, c.mlp_width, c.mlp_hidden_layers, d2);
            let f = layout.mlp(&format!("step{t}.f"), d1 + d2, c.mlp_width, c.mlp_hidden_layers, c.node_hidden);
            let f_edge = layout.mlp(&format!("step{t}.f_edge"), 2 * d2, c.mlp_width, c.mlp_hidden_layers, c.edge_hidden);
            steps.push(StepLayout { wq, wk, phi, f, f_edge });
        }
        let w_re = layout.push("w_out.re", &[3, d1]);
        let w_im = layout.push("w_out.im", &[3, d1]);
        let jastrow = layout.mlp(
            "jastrow",
            JASTROW_COORD_INPUTS + JASTROW_ORBITAL_INPUTS,
            c.jastrow_width,
            1,
            1,
        );
        let alpha = gaussian_width.then(|| layout.push("orbital.alpha", &[1]));
        Ok(Self {
            config: c.clone(),
            layout,
            embedding,
            node_h0,
            edge_h0,
            steps,
            w_re,
            w_im,
            jastrow,
            alpha,
        })
    }

    pub fn n_params(&self) -> usize {
        self.layout.len()
    }

    pub fn node_dim(&self) -> usize {
        self.config.node_dim()
    }

    pub fn edge_dim(&self) -> usize {
        self.config.edge_dim()
    }
}

/// Flat parameter vector together with its architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParameters {
    pub arch: Arc<Architecture>,
    pub values: Vec<f64>,
}

impl NetworkParameters {
    /// Fan-in scaled normal weights, zero biases, unit-normal learnable
    /// vectors and a small output map.
    pub fn init(arch: Arc<Architecture>, alpha: Option<f64>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(arch.config.seed);
        let mut values = vec![0.0; arch.n_params()];
        for e in arch.layout.entries() {
            let r = e.range();
            if e.name.ends_with(".bias") {
                continue;
            }
            let std = if e.name.starts_with("w_out") {
                arch.config.output_init_scale / (arch.node_dim() as f64).sqrt()
            } else if e.shape.len() == 2 {
                1.0 / (e.shape[1] as f64).sqrt()
            } else {
                1.0
            };
            if e.name == "orbital.alpha" {
                values[r.start] = alpha.unwrap_or(1.0);
                continue;
            }
            for v in &mut values[r] {
                *v = std * normal(&mut rng);
            }
        }
        Self { arch, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.arch.layout.get(name).map(|e| &self.values[e.range()])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.arch.layout.get(name)?.range();
        Some(&mut self.values[r])
    }

    pub fn alpha(&self) -> Option<f64> {
        self.arch.alpha.map(|o| self.values[o])
    }

    #[inline]
    fn slice(&self, off: usize, len: usize) -> &[f64] {
        &self.values[off..off + len]
    }
}

/// Node and edge hidden states after `step` message-passing iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphState {
    pub n: usize,
    pub node_dim: usize,
    pub edge_dim: usize,
    /// `N × D1`, row-major.
    pub nodes: Vec<f64>,
    /// `N × N × D2`, row-major.
    pub edges: Vec<f64>,
    pub step: usize,
}

/// Layer-0 edge features for every ordered pair, with local derivatives
/// with respect to `r_i − r_j` when `local_derivs` is set.
fn edge_feature_jets(positions: &[[f64; 3]], spins: &[Spin], cell: &SimulationCell, local_derivs: bool) -> Jets {
    let n = positions.len();
    let ng = if local_derivs { 3 } else { 0 };
    let mut x = Jets::zeros(n * n, EDGE_FEATURES, ng);
    let w = 2.0 * std::f64::consts::PI / cell.side();
    let wh = 0.5 * w;
    for i in 0..n {
        for j in 0..n {
            let it = i * n + j;
            let sp = spins[i].sign() * spins[j].sign();
            if i == j {
                let v = x.value_mut(it);
                v[3..6].fill(1.0);
                v[7] = sp;
                continue;
            }
            let mut r = [0.0; 3];
            for a in 0..3 {
                r[a] = cell.min_image_component(positions[i][a] - positions[j][a]);
            }
            let (mut sn, mut cs) = ([0.0; 3], [0.0; 3]);
            let (mut hs, mut hc) = ([0.0; 3], [0.0; 3]);
            for a in 0..3 {
                let (s, c) = (w * r[a]).sin_cos();
                sn[a] = s;
                cs[a] = c;
                let (s, c) = (wh * r[a]).sin_cos();
                hs[a] = s;
                hc[a] = c;
            }
            let surr = (hs[0] * hs[0] + hs[1] * hs[1] + hs[2] * hs[2]).sqrt();
            {
                let v = x.value_mut(it);
                v[..3].copy_from_slice(&sn);
                v[3..6].copy_from_slice(&cs);
                v[6] = surr;
                v[7] = sp;
            }
            if !local_derivs {
                continue;
            }
            for a in 0..3 {
                let g = x.chan_mut(it, 1 + a);
                g[a] = w * cs[a];
                g[3 + a] = -w * sn[a];
                if surr > 1e-300 {
                    g[6] = wh * hs[a] * hc[a] / surr;
                }
            }
            let lap = x.chan_mut(it, 4);
            let mut ls = 0.0;
            for a in 0..3 {
                lap[a] = -w * w * sn[a];
                lap[3 + a] = -w * w * cs[a];
                if surr > 1e-300 {
                    let p = wh * hs[a] * hc[a];
                    ls += wh * wh * (hc[a] * hc[a] - hs[a] * hs[a]) / surr - p * p / (surr * surr * surr);
                }
            }
            lap[6] = ls;
        }
    }
    x
}

/// Expands local pair derivatives (`ngrad = 3`) to all `3N` coordinates.
fn densify(local: &Jets, n: usize) -> Jets {
    if local.ngrad == 0 {
        return local.clone();
    }
    debug_assert_eq!(local.ngrad, 3);
    let f = local.feats;
    let mut out = Jets::zeros(local.items, f, 3 * n);
    for i in 0..n {
        for j in 0..n {
            let it = i * n + j;
            out.value_mut(it).copy_from_slice(local.value(it));
            if i == j {
                continue;
            }
            for a in 0..3 {
                let g = local.chan(it, 1 + a).to_vec();
                out.chan_mut(it, 1 + 3 * i + a).copy_from_slice(&g);
                for (o, v) in out.chan_mut(it, 1 + 3 * j + a).iter_mut().zip(&g) {
                    *o = -v;
                }
            }
            let lap: Vec<f64> = local.chan(it, 4).iter().map(|v| 2.0 * v).collect();
            let lc = 3 * n + 1;
            out.chan_mut(it, lc).copy_from_slice(&lap);
        }
    }
    out
}

/// `S_ij[c] = Σ_l Q_il[c] K_lj[c]`. With local inputs (`ngrad = 3`) the
/// output carries all `3N` derivatives.
fn attention_scores(q: &Jets, k: &Jets, n: usize) -> Jets {
    let f = q.feats;
    match q.ngrad {
        0 => {
            let mut s = Jets::zeros(n * n, f, 0);
            for i in 0..n {
                for l in 0..n {
                    let qv = q.value(i * n + l);
                    for j in 0..n {
                        let kv = k.value(l * n + j);
                        let out = &mut s.data[(i * n + j) * f..(i * n + j + 1) * f];
                        for c in 0..f {
                            out[c] += qv[c] * kv[c];
                        }
                    }
                }
            }
            s
        }
        3 => {
            let ng = 3 * n;
            let mut s = Jets::zeros(n * n, f, ng);
            let lc = ng + 1;
            let mut dot = vec![0.0; f];
            for i in 0..n {
                for j in 0..n {
                    let cross = if i == j { -4.0 } else { -2.0 };
                    let blk = s.item_mut(i * n + j);
                    for l in 0..n {
                        let qi = q.item(i * n + l);
                        let kj = k.item(l * n + j);
                        let (qv, kv) = (&qi[..f], &kj[..f]);
                        for (o, (a, b)) in blk[..f].iter_mut().zip(qv.iter().zip(kv)) {
                            *o += a * b;
                        }
                        dot.fill(0.0);
                        for a in 0..3 {
                            let gq = &qi[(1 + a) * f..(2 + a) * f];
                            let gk = &kj[(1 + a) * f..(2 + a) * f];
                            for c in 0..f {
                                dot[c] += gq[c] * gk[c];
                            }
                            let oi = (1 + 3 * i + a) * f;
                            for (o, (x, y)) in blk[oi..oi + f].iter_mut().zip(kv.iter().zip(gq)) {
                                *o += x * y;
                            }
                            let ol = (1 + 3 * l + a) * f;
                            for (c, o) in blk[ol..ol + f].iter_mut().enumerate() {
                                *o += qv[c] * gk[c] - kv[c] * gq[c];
                            }
                            let oj = (1 + 3 * j + a) * f;
                            for (o, (x, y)) in blk[oj..oj + f].iter_mut().zip(qv.iter().zip(gk)) {
                                *o -= x * y;
                            }
                        }
                        let (lq, lk) = (&qi[4 * f..5 * f], &kj[4 * f..5 * f]);
                        for (c, o) in blk[lc * f..(lc + 1) * f].iter_mut().enumerate() {
                            *o += 2.0 * (kv[c] * lq[c] + qv[c] * lk[c]) + cross * dot[c];
                        }
                    }
                }
            }
            s
        }
        ng => {
            let mut s = Jets::zeros(n * n, f, ng);
            let lc = ng + 1;
            for i in 0..n {
                for j in 0..n {
                    let blk = s.item_mut(i * n + j);
                    for l in 0..n {
                        let qi = q.item(i * n + l);
                        let kj = k.item(l * n + j);
                        for c in 0..f {
                            blk[c] += qi[c] * kj[c];
                            blk[lc * f + c] += qi[c] * kj[lc * f + c] + kj[c] * qi[lc * f + c];
                        }
                        for ch in 1..=ng {
                            let o = ch * f;
                            for c in 0..f {
                                let (gq, gk) = (qi[o + c], kj[o + c]);
                                blk[o + c] += kj[c] * gq + qi[c] * gk;
                                blk[lc * f + c] += 2.0 * gq * gk;
                            }
                        }
                    }
                }
            }
            s
        }
    }
}

/// `m_ij = ω_ij ⊙ V_ij` where `ω` is dense and `V` may be local.
fn gate(omega: &Jets, v: &Jets, n: usize) -> Jets {
    let f = omega.feats;
    let ng = omega.ngrad;
    let mut m = Jets::zeros(omega.items, f, ng);
    if ng == 0 {
        for (o, (a, b)) in m.data.iter_mut().zip(omega.data.iter().zip(&v.data)) {
            *o = a * b;
        }
        return m;
    }
    let lc = ng + 1;
    let local = v.ngrad == 3 && ng != 3;
    for i in 0..n {
        for j in 0..n {
            let it = i * n + j;
            let w = omega.item(it);
            let vv = v.item(it);
            let out = m.item_mut(it);
            for c in 0..f {
                let (wv, vval) = (w[c], vv[c]);
                out[c] = wv * vval;
                for ch in 1..=ng {
                    out[ch * f + c] = vval * w[ch * f + c];
                }
                out[lc * f + c] = vval * w[lc * f + c];
            }
            if local {
                if i == j {
                    continue;
                }
                for c in 0..f {
                    let wv = w[c];
                    let mut cross = 0.0;
                    for a in 0..3 {
                        let g = vv[(1 + a) * f + c];
                        out[(1 + 3 * i + a) * f + c] += wv * g;
                        out[(1 + 3 * j + a) * f + c] -= wv * g;
                        cross += g * (w[(1 + 3 * i + a) * f + c] - w[(1 + 3 * j + a) * f + c]);
                    }
                    out[lc * f + c] += 2.0 * wv * vv[4 * f + c] + 2.0 * cross;
                }
            } else {
                for c in 0..f {
                    let wv = w[c];
                    let mut cross = 0.0;
                    for ch in 1..=ng {
                        let g = vv[ch * f + c];
                        out[ch * f + c] += wv * g;
                        cross += g * w[ch * f + c];
                    }
                    out[lc * f + c] += wv * vv[lc * f + c] + 2.0 * cross;
                }
            }
        }
    }
    m
}

/// `M_i = Σ_{j≠i} m_ij`; zero for a single particle.
fn aggregate(m: &Jets, n: usize) -> Jets {
    let f = m.feats;
    let mut out = Jets::zeros(n, f, m.ngrad);
    let sz = m.chans() * f;
    for i in 0..n {
        let dst = out.item_mut(i);
        for j in 0..n {
            if i == j {
                continue;
            }
            let src = &m.data[(i * n + j) * sz..(i * n + j + 1) * sz];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct StepCache {
    edges_in: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    s: Vec<f64>,
    omega: Vec<f64>,
    v: Vec<f64>,
    phi: MlpCache,
    f: MlpCache,
    f_edge: Option<MlpCache>,
}

/// Everything the reverse pass needs from a value-only forward pass.
#[derive(Clone, Debug, Default)]
pub struct NetCache {
    n: usize,
    steps: Vec<StepCache>,
    final_nodes: Vec<f64>,
}

/// Backflow displacement jets: real and imaginary parts, `N` items × 3.
#[derive(Clone, Debug)]
pub struct BackflowJets {
    pub re: Jets,
    pub im: Jets,
}

impl NetworkParameters {
    fn initial_state(&self, x0: &Jets, n: usize, ngrad: usize) -> (Jets, Jets) {
        let c = &self.arch.config;
        let mut node0 = Vec::with_capacity(n * self.arch.node_dim());
        for _ in 0..n {
            node0.extend_from_slice(self.slice(self.arch.embedding, c.embedding_dim));
            node0.extend_from_slice(self.slice(self.arch.node_h0, c.node_hidden));
        }
        let nodes = Jets::constant(&node0, n, self.arch.node_dim(), ngrad);
        let h0 = self.slice(self.arch.edge_h0, c.edge_hidden);
        let hb: Vec<f64> = (0..n * n).flat_map(|_| h0.iter().copied()).collect();
        let edges = x0.concat(&Jets::constant(&hb, n * n, c.edge_hidden, x0.ngrad));
        (nodes, edges)
    }

    /// One message-passing iteration. `edges` may carry local pair
    /// derivatives (`ngrad = 3`) at the first step; all returned tensors
    /// carry the full coordinate derivatives.
    #[allow(clippy::too_many_arguments)]
    fn step_forward(
        &self,
        t: usize,
        nodes: &Jets,
        edges: &Jets,
        x0: &Jets,
        n: usize,
        update_edges: bool,
        mut cache: Option<&mut StepCache>,
    ) -> (Jets, Option<Jets>, Jets) {
        let st = &self.arch.steps[t];
        let d2 = self.arch.edge_dim();
        let p = &self.values;
        let q = edges.linear(self.slice(st.wq, d2 * d2), None, d2);
        let k = edges.linear(self.slice(st.wk, d2 * d2), None, d2);
        let v = match cache.as_deref_mut() {
            Some(c) => st.phi.forward_cached(p, edges, &mut c.phi),
            None => st.phi.forward(p, edges),
        };
        let s = attention_scores(&q, &k, n);
        let mut omega = s.clone();
        omega.gelu_in_place();
        let m = gate(&omega, &v, n);
        let agg = aggregate(&m, n);
        let nodes_full = if nodes.ngrad == agg.ngrad {
            nodes.clone()
        } else {
            Jets::constant(&nodes.values(), n, nodes.feats, agg.ngrad)
        };
        let f_in = nodes_full.concat(&agg);
        let h = match cache.as_deref_mut() {
            Some(c) => st.f.forward_cached(p, &f_in, &mut c.f),
            None => st.f.forward(p, &f_in),
        };
        let c = &self.arch.config;
        let emb = self.slice(self.arch.embedding, c.embedding_dim);
        let eb: Vec<f64> = (0..n).flat_map(|_| emb.iter().copied()).collect();
        let new_nodes = Jets::constant(&eb, n, c.embedding_dim, h.ngrad).concat(&h);
        let new_edges = if update_edges {
            let e_full = if edges.ngrad == m.ngrad { edges.clone() } else { densify(edges, n) };
            let fe_in = e_full.concat(&m);
            let he = match cache.as_deref_mut() {
                Some(cc) => {
                    let mut mc = MlpCache::default();
                    let r = st.f_edge.forward_cached(p, &fe_in, &mut mc);
                    cc.f_edge = Some(mc);
                    r
                }
                None => st.f_edge.forward(p, &fe_in),
            };
            let x0_full = if x0.ngrad == he.ngrad { x0.clone() } else { densify(x0, n) };
            Some(x0_full.concat(&he))
        } else {
            None
        };
        if let Some(c) = cache {
            c.edges_in = edges.data.clone();
            c.q = q.data;
            c.k = k.data;
            c.s = s.data;
            c.omega = omega.data;
            c.v = v.data;
        }
        (new_nodes, new_edges, m)
    }

    /// Full network from positions to the complex displacement jets. With
    /// `derivs` the jets carry all `3N` coordinate derivatives and the
    /// Laplacian; otherwise values only, optionally recording `cache`.
    pub fn backflow_jets(
        &self,
        positions: &[[f64; 3]],
        spins: &[Spin],
        cell: &SimulationCell,
        derivs: bool,
        mut cache: Option<&mut NetCache>,
    ) -> BackflowJets {
        let n = positions.len();
        let x0 = edge_feature_jets(positions, spins, cell, derivs);
        let ngrad = if derivs { 3 * n } else { 0 };
        let t_steps = self.arch.config.steps;
        let (mut nodes, mut edges) = self.initial_state(&x0, n, if t_steps == 0 { ngrad } else { 0 });
        if let Some(c) = cache.as_deref_mut() {
            c.n = n;
            c.steps.clear();
        }
        for t in 0..t_steps {
            let last = t + 1 == t_steps;
            let mut sc = cache.is_some().then(StepCache::default);
            let (nn, ne, _) = self.step_forward(t, &nodes, &edges, &x0, n, !last, sc.as_mut());
            if let (Some(c), Some(s)) = (cache.as_deref_mut(), sc) {
                c.steps.push(s);
            }
            nodes = nn;
            if let Some(e) = ne {
                edges = e;
            }
        }
        if nodes.ngrad != ngrad {
            nodes = Jets::constant(&nodes.values(), n, nodes.feats, ngrad);
        }
        let d1 = self.arch.node_dim();
        let re = nodes.linear(self.slice(self.arch.w_re, 3 * d1), None, 3);
        let im = nodes.linear(self.slice(self.arch.w_im, 3 * d1), None, 3);
        if let Some(c) = cache {
            c.final_nodes = nodes.data;
        }
        BackflowJets { re, im }
    }

    /// Reverse pass. `d_re` and `d_im` hold two adjoint seeds per particle
    /// (`[i][seed][axis]`) for the real and imaginary displacement parts;
    /// parameter gradients are accumulated into `grads[seed]`.
    pub fn backflow_backward(&self, cache: &NetCache, d_re: &[f64], d_im: &[f64], grads: &mut [Vec<f64>]) {
        const S: usize = 2;
        let n = cache.n;
        let arch = &self.arch;
        let c = &arch.config;
        let (d1, d2) = (arch.node_dim(), arch.edge_dim());
        let p = &self.values;

        matrix_backward_params(arch.w_re, d1, 3, &cache.final_nodes, d_re, n, S, grads);
        matrix_backward_params(arch.w_im, d1, 3, &cache.final_nodes, d_im, n, S, grads);
        let mut d_nodes = vec![0.0; n * S * d1];
        gemm(n * S, 3, d1, d_re, self.slice(arch.w_re, 3 * d1), &mut d_nodes, false);
        gemm(n * S, 3, d1, d_im, self.slice(arch.w_im, 3 * d1), &mut d_nodes, true);
        let mut d_edges: Option<Vec<f64>> = None;

        for t in (0..c.steps).rev() {
            let st = &arch.steps[t];
            let sc = &cache.steps[t];
            // nodes_out = [embedding, h]
            let de = c.embedding_dim;
            let mut d_h = vec![0.0; n * S * c.node_hidden];
            for i in 0..n {
                for s in 0..S {
                    let row = &d_nodes[(i * S + s) * d1..(i * S + s + 1) * d1];
                    for (q, v) in row[..de].iter().enumerate() {
                        grads[s][arch.embedding + q] += v;
                    }
                    d_h[(i * S + s) * c.node_hidden..(i * S + s + 1) * c.node_hidden].copy_from_slice(&row[de..]);
                }
            }
            let d_fin = st.f.backward(p, &sc.f, &d_h, S, grads);
            let fin = d1 + d2;
            let mut d_nodes_in = vec![0.0; n * S * d1];
            let mut d_m = vec![0.0; n * n * S * d2];
            for i in 0..n {
                for s in 0..S {
                    let row = &d_fin[(i * S + s) * fin..(i * S + s + 1) * fin];
                    d_nodes_in[(i * S + s) * d1..(i * S + s + 1) * d1].copy_from_slice(&row[..d1]);
                    for j in 0..n {
                        if j != i {
                            d_m[((i * n + j) * S + s) * d2..((i * n + j) * S + s + 1) * d2].copy_from_slice(&row[d1..]);
                        }
                    }
                }
            }
            let mut d_e_in = vec![0.0; n * n * S * d2];
            if let (Some(de_out), Some(fc)) = (d_edges.as_ref(), sc.f_edge.as_ref()) {
                let eh = c.edge_hidden;
                let mut d_he = vec![0.0; n * n * S * eh];
                for r in 0..n * n * S {
                    d_he[r * eh..(r + 1) * eh].copy_from_slice(&de_out[r * d2 + EDGE_FEATURES..(r + 1) * d2]);
                }
                let d_fe = st.f_edge.backward(p, fc, &d_he, S, grads);
                for r in 0..n * n * S {
                    let row = &d_fe[r * 2 * d2..(r + 1) * 2 * d2];
                    for q in 0..d2 {
                        d_e_in[r * d2 + q] += row[q];
                        d_m[r * d2 + q] += row[d2 + q];
                    }
                }
            }
            // m = ω ⊙ V, ω = GELU(S)
            let mut d_v = vec![0.0; n * n * S * d2];
            let mut d_s = vec![0.0; n * n * S * d2];
            for it in 0..n * n {
                for s in 0..S {
                    for q in 0..d2 {
                        let r = (it * S + s) * d2 + q;
                        let x = it * d2 + q;
                        d_v[r] = d_m[r] * sc.omega[x];
                        d_s[r] = d_m[r] * sc.v[x] * gelu_jet(sc.s[x]).1;
                    }
                }
            }
            let mut d_q = vec![0.0; n * n * S * d2];
            let mut d_k = vec![0.0; n * n * S * d2];
            for i in 0..n {
                for l in 0..n {
                    for j in 0..n {
                        let qv = &sc.q[(i * n + l) * d2..(i * n + l + 1) * d2];
                        let kv = &sc.k[(l * n + j) * d2..(l * n + j + 1) * d2];
                        for s in 0..S {
                            let ds = &d_s[((i * n + j) * S + s) * d2..((i * n + j) * S + s + 1) * d2];
                            let oq = ((i * n + l) * S + s) * d2;
                            let ok = ((l * n + j) * S + s) * d2;
                            for q in 0..d2 {
                                d_q[oq + q] += ds[q] * kv[q];
                                d_k[ok + q] += ds[q] * qv[q];
                            }
                        }
                    }
                }
            }
            let items = n * n;
            matrix_backward_params(st.wq, d2, d2, &sc.edges_in, &d_q, items, S, grads);
            matrix_backward_params(st.wk, d2, d2, &sc.edges_in, &d_k, items, S, grads);
            gemm(items * S, d2, d2, &d_q, self.slice(st.wq, d2 * d2), &mut d_e_in, true);
            gemm(items * S, d2, d2, &d_k, self.slice(st.wk, d2 * d2), &mut d_e_in, true);
            let d_from_phi = st.phi.backward(p, &sc.phi, &d_v, S, grads);
            for (a, b) in d_e_in.iter_mut().zip(&d_from_phi) {
                *a += b;
            }
            d_nodes = d_nodes_in;
            d_edges = Some(d_e_in);
        }

        // initial states: nodes [embedding, node_h0], edges [x0, edge_h0]
        let de = c.embedding_dim;
        for i in 0..n {
            for s in 0..S {
                let row = &d_nodes[(i * S + s) * d1..(i * S + s + 1) * d1];
                for q in 0..de {
                    grads[s][arch.embedding + q] += row[q];
                }
                for q in 0..c.node_hidden {
                    grads[s][arch.node_h0 + q] += row[de + q];
                }
            }
        }
        if let Some(d_e) = d_edges {
            for r in 0..n * n {
                for s in 0..S {
                    let row = &d_e[(r * S + s) * d2..(r * S + s + 1) * d2];
                    for q in 0..c.edge_hidden {
                        grads[s][arch.edge_h0 + q] += row[EDGE_FEATURES + q];
                    }
                }
            }
        }
    }
}

/// Initial node features (the embedding, broadcast) and edge features
/// (`N × N × 8`).
pub fn initial_features(config: &ParticleConfiguration, cell: &SimulationCell, params: &NetworkParameters) -> (Vec<f64>, Vec<f64>) {
    let n = config.n_particles();
    let emb = params.block("embedding").unwrap_or(&[]);
    let nodes = (0..n).flat_map(|_| emb.iter().copied()).collect();
    let edges = edge_feature_jets(config.positions(), config.spins(), cell, false).data;
    (nodes, edges)
}

/// Attention-weighted messages for an `N × N × D2` edge tensor using the
/// parameters of step `t`.
pub fn particle_attention(edges: &[f64], n: usize, params: &NetworkParameters, t: usize) -> Result<Vec<f64>> {
    let d2 = params.arch.edge_dim();
    let st = params.arch.steps.get(t).ok_or_else(|| Error::InvalidInput(format!("no message-passing step {t}")))?;
    if edges.len() != n * n * d2 {
        return Err(Error::InvalidInput(format!("edge tensor has {} entries, expected {}", edges.len(), n * n * d2)));
    }
    let e = Jets::constant(edges, n * n, d2, 0);
    let q = e.linear(params.slice(st.wq, d2 * d2), None, d2);
    let k = e.linear(params.slice(st.wk, d2 * d2), None, d2);
    let v = st.phi.forward(&params.values, &e);
    let mut omega = attention_scores(&q, &k, n);
    omega.gelu_in_place();
    Ok(gate(&omega, &v, n).data)
}

impl GraphState {
    pub fn initial(config: &ParticleConfiguration, cell: &SimulationCell, params: &NetworkParameters) -> Self {
        let n = config.n_particles();
        let x0 = edge_feature_jets(config.positions(), config.spins(), cell, false);
        let (nodes, edges) = params.initial_state(&x0, n, 0);
        Self {
            n,
            node_dim: params.arch.node_dim(),
            edge_dim: params.arch.edge_dim(),
            nodes: nodes.data,
            edges: edges.data,
            step: 0,
        }
    }
}

/// One full message-passing iteration including the edge update.
pub fn mpnn_step(graph: &GraphState, params: &NetworkParameters) -> Result<GraphState> {
    let t = graph.step;
    if t >= params.arch.config.steps {
        return Err(Error::InvalidState(format!("step {t} exceeds the configured {} iterations", params.arch.config.steps)));
    }
    let n = graph.n;
    let d2 = graph.edge_dim;
    let nodes = Jets::constant(&graph.nodes, n, graph.node_dim, 0);
    let edges = Jets::constant(&graph.edges, n * n, d2, 0);
    let x0 = edges.slice_feats(0, EDGE_FEATURES);
    let (nn, ne, _) = params.step_forward(t, &nodes, &edges, &x0, n, true, None);
    Ok(GraphState {
        n,
        node_dim: graph.node_dim,
        edge_dim: d2,
        nodes: nn.data,
        edges: ne.map(|e| e.data).unwrap_or_default(),
        step: t + 1,
    })
}

/// Complex displacements `δr_i = W g_i` after `T` iterations.
pub fn backflow_displacements(config: &ParticleConfiguration, cell: &SimulationCell, params: &NetworkParameters) -> Vec<[Complex64; 3]> {
    let bj = params.backflow_jets(config.positions(), config.spins(), cell, false, None);
    (0..config.n_particles())
        .map(|i| {
            let (r, m) = (bj.re.value(i), bj.im.value(i));
            [
                Complex64::new(r[0], m[0]),
                Complex64::new(r[1], m[1]),
                Complex64::new(r[2], m[2]),
            ]
        })
        .collect()
}
