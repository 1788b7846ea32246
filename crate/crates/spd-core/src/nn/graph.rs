//! Reverse-mode tape over f64 tensors.
//!
//! A `Graph` records every forward operation together with whatever the
//! backward pass will need, then replays the tape in reverse. Reductions run
//! in a fixed order, so gradients are bit-reproducible for a given build.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Array3, Array4, ArrayViewD, IxDyn};

use crate::error::{Error, Result};
use crate::nn::kernels::{
    self, avg_pool_backward, avg_pool_forward, bilinear_backward, bilinear_forward, bn_backward,
    bn_forward_eval, bn_forward_train, conv2d_backward, conv2d_forward, dense_loss_backward,
    dense_loss_forward, gaussian_maps_backward, gaussian_maps_forward, pose_l2_backward,
    pose_l2_forward, seg_ce_backward, seg_ce_forward, soft_argmax_backward, soft_argmax_forward,
    BnCache,
};
use crate::nn::params::ParamStore;
use crate::types::DenseLossForm;

/// Exponential-moving-average factor for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
/// Variance floor inside batch norm.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a value on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Node(usize);

/// A tape value: scalar or rank-1/3/4 tensor.
#[derive(Clone, Debug)]
pub enum Val {
    S(f64),
    V1(Array1<f64>),
    V3(Array3<f64>),
    V4(Array4<f64>),
}

impl Val {
    pub fn scalar(&self) -> f64 {
        match self {
            Val::S(v) => *v,
            _ => panic!("expected scalar value"),
        }
    }

    pub fn as1(&self) -> &Array1<f64> {
        match self {
            Val::V1(a) => a,
            _ => panic!("expected rank-1 value"),
        }
    }

    pub fn as3(&self) -> &Array3<f64> {
        match self {
            Val::V3(a) => a,
            _ => panic!("expected rank-3 value"),
        }
    }

    pub fn as4(&self) -> &Array4<f64> {
        match self {
            Val::V4(a) => a,
            _ => panic!("expected rank-4 value"),
        }
    }

    /// Dynamic-rank view, shaped like the underlying tensor.
    pub fn view_dyn(&self) -> ArrayViewD<'_, f64> {
        match self {
            Val::S(v) => ArrayViewD::from_shape(IxDyn(&[]), std::slice::from_ref(v)).unwrap(),
            Val::V1(a) => a.view().into_dyn(),
            Val::V3(a) => a.view().into_dyn(),
            Val::V4(a) => a.view().into_dyn(),
        }
    }

    fn add_assign(&mut self, other: &Val) {
        match (self, other) {
            (Val::S(a), Val::S(b)) => *a += b,
            (Val::V1(a), Val::V1(b)) => *a += b,
            (Val::V3(a), Val::V3(b)) => *a += b,
            (Val::V4(a), Val::V4(b)) => *a += b,
            _ => panic!("gradient rank mismatch"),
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            Val::S(v) => v.is_finite(),
            Val::V1(a) => a.iter().all(|v| v.is_finite()),
            Val::V3(a) => a.iter().all(|v| v.is_finite()),
            Val::V4(a) => a.iter().all(|v| v.is_finite()),
        }
    }
}

enum Op {
    Input,
    Param {
        store_id: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
        dilation: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        cache: BnCache,
    },
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    ConcatC {
        parts: Vec<usize>,
    },
    AvgPool {
        x: usize,
        k: usize,
    },
    Bilinear {
        x: usize,
    },
    SoftArgmax {
        logits: usize,
        probs: Array4<f64>,
    },
    GaussianMaps {
        coords: usize,
        sigma: f64,
    },
    SegCe {
        logits: usize,
        target: Array3<u8>,
        probs: Array4<f64>,
    },
    PoseL2 {
        coords: usize,
        target: Array3<f64>,
        vis: Array2<bool>,
        supervised: usize,
    },
    DenseLoss {
        logits: usize,
        uv: usize,
        part: Array3<u8>,
        tuv: Array4<f64>,
        valid: Vec<bool>,
        form: DenseLossForm,
        delta: f64,
        fg: usize,
        bg: usize,
        probs: Array4<f64>,
    },
    WeightedSum {
        terms: Vec<(usize, f64)>,
    },
}

/// Gradients produced by [`Graph::backward`]. Leaf gradients (inputs and
/// parameters) are retained; intermediate gradients are released during the
/// reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Val>>,
    param_nodes: HashMap<usize, usize>,
}

impl Gradients {
    /// Gradient w.r.t. a leaf node, if it received any.
    pub fn wrt(&self, n: Node) -> Option<&Val> {
        self.grads[n.0].as_ref()
    }

    /// Gradient w.r.t. a parameter, addressed by its store id.
    pub fn param(&self, store_id: usize) -> Option<&Val> {
        self.param_nodes
            .get(&store_id)
            .and_then(|&idx| self.grads[idx].as_ref())
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.is_finite())
    }
}

/// Operation tape bound to a parameter store for one forward/backward pass.
pub struct Graph<'s> {
    store: &'s mut ParamStore,
    training: bool,
    ops: Vec<Op>,
    vals: Vec<Val>,
    param_nodes: HashMap<usize, usize>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s mut ParamStore, training: bool) -> Self {
        Graph {
            store,
            training,
            ops: Vec::new(),
            vals: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store_ref(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, n: Node) -> &Val {
        &self.vals[n.0]
    }

    fn push(&mut self, op: Op, val: Val) -> Node {
        self.ops.push(op);
        self.vals.push(val);
        Node(self.ops.len() - 1)
    }

    pub fn input4(&mut self, x: Array4<f64>) -> Node {
        self.push(Op::Input, Val::V4(x))
    }

    pub fn input3(&mut self, x: Array3<f64>) -> Node {
        self.push(Op::Input, Val::V3(x))
    }

    /// Node for a parameter, by store id. Repeated calls reuse the node, so
    /// shared parameters accumulate gradient from every use.
    pub fn param(&mut self, store_id: usize) -> Node {
        if let Some(&idx) = self.param_nodes.get(&store_id) {
            return Node(idx);
        }
        let v = self.store.value(store_id);
        let val = match v.ndim() {
            1 => Val::V1(v.clone().into_dimensionality().unwrap()),
            3 => Val::V3(v.clone().into_dimensionality().unwrap()),
            4 => Val::V4(v.clone().into_dimensionality().unwrap()),
            d => panic!("unsupported parameter rank {d}"),
        };
        let node = self.push(Op::Param { store_id }, val);
        self.param_nodes.insert(store_id, node.0);
        node
    }

    /// Parameter node by name.
    pub fn param_named(&mut self, name: &str) -> Result<Node> {
        let id = self.store.id(name)?;
        Ok(self.param(id))
    }

    pub fn conv2d(
        &mut self,
        x: Node,
        w: Node,
        b: Option<Node>,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<Node> {
        let bias = b.map(|n| self.vals[n.0].as1().clone());
        let y = conv2d_forward(
            self.vals[x.0].as4(),
            self.vals[w.0].as4(),
            bias.as_ref(),
            stride,
            pad,
            dilation,
        )?;
        Ok(self.push(
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|n| n.0),
                stride,
                pad,
                dilation,
            },
            Val::V4(y),
        ))
    }

    /// Batch norm. `running_mean_id`/`running_var_id` are buffer ids in the
    /// store; in training mode the running statistics are updated in place.
    pub fn batch_norm(
        &mut self,
        x: Node,
        gamma: Node,
        beta: Node,
        running_mean_id: usize,
        running_var_id: usize,
    ) -> Result<Node> {
        let g: Vec<f64> = self.vals[gamma.0].as1().to_vec();
        let be: Vec<f64> = self.vals[beta.0].as1().to_vec();
        let xv = self.vals[x.0].as4();
        let c = xv.dim().1;
        if g.len() != c || be.len() != c {
            return Err(Error::Shape(format!(
                "batch norm expects {c}-channel scale/shift, got {}/{}",
                g.len(),
                be.len()
            )));
        }
        let (y, cache) = if self.training {
            let (bs, _, h, w) = xv.dim();
            let m = (bs * h * w) as f64;
            let (y, mean, var, cache) = bn_forward_train(xv, &g, &be, BN_EPS);
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let rm = self.store.value_mut(running_mean_id);
            for (r, &b) in rm.iter_mut().zip(mean.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            let rv = self.store.value_mut(running_var_id);
            for (r, &b) in rv.iter_mut().zip(var.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * unbias;
            }
            (y, cache)
        } else {
            let rm: Vec<f64> = self.store.value(running_mean_id).iter().copied().collect();
            let rv: Vec<f64> = self.store.value(running_var_id).iter().copied().collect();
            if rm.len() != c || rv.len() != c {
                return Err(Error::Shape("running statistics length mismatch".into()));
            }
            let (y, cache) = bn_forward_eval(xv, &g, &be, &rm, &rv, BN_EPS);
            (y, cache)
        };
        Ok(self.push(
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                cache,
            },
            Val::V4(y),
        ))
    }

    pub fn relu(&mut self, x: Node) -> Node {
        let y = self.vals[x.0].as4().mapv(|v| v.max(0.0));
        self.push(Op::Relu { x: x.0 }, Val::V4(y))
    }

    pub fn sigmoid(&mut self, x: Node) -> Node {
        let y = self.vals[x.0].as4().mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid { x: x.0 }, Val::V4(y))
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        let av = self.vals[a.0].as4();
        let bv = self.vals[b.0].as4();
        if av.dim() != bv.dim() {
            return Err(Error::Shape(format!(
                "add shapes disagree: {:?} vs {:?}",
                av.dim(),
                bv.dim()
            )));
        }
        let y = av + bv;
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, Val::V4(y)))
    }

    pub fn concat_c(&mut self, parts: &[Node]) -> Result<Node> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat of zero tensors".into()));
        }
        let (bs, _, h, w) = self.vals[parts[0].0].as4().dim();
        let mut c_total = 0;
        for p in parts {
            let d = self.vals[p.0].as4().dim();
            if (d.0, d.2, d.3) != (bs, h, w) {
                return Err(Error::Shape(format!(
                    "concat spatial/batch mismatch: {:?} vs ({bs}, _, {h}, {w})",
                    d
                )));
            }
            c_total += d.1;
        }
        let mut y = Array4::<f64>::zeros((bs, c_total, h, w));
        let mut off = 0;
        for p in parts {
            let v = self.vals[p.0].as4();
            let c = v.dim().1;
            y.slice_mut(ndarray::s![.., off..off + c, .., ..]).assign(v);
            off += c;
        }
        Ok(self.push(
            Op::ConcatC {
                parts: parts.iter().map(|n| n.0).collect(),
            },
            Val::V4(y),
        ))
    }

    pub fn avg_pool(&mut self, x: Node, k: usize) -> Result<Node> {
        let y = avg_pool_forward(self.vals[x.0].as4(), k)?;
        Ok(self.push(Op::AvgPool { x: x.0, k }, Val::V4(y)))
    }

    pub fn bilinear(&mut self, x: Node, oh: usize, ow: usize) -> Node {
        let y = bilinear_forward(self.vals[x.0].as4(), oh, ow);
        self.push(Op::Bilinear { x: x.0 }, Val::V4(y))
    }

    /// Spatial softmax + expected coordinate per channel; value is
    /// `(batch, channels, 2)` normalized `(x, y)`.
    pub fn soft_argmax(&mut self, logits: Node) -> Node {
        let (coords, probs) = soft_argmax_forward(self.vals[logits.0].as4());
        self.push(
            Op::SoftArgmax {
                logits: logits.0,
                probs,
            },
            Val::V3(coords),
        )
    }

    /// Renders `(batch, n, 2)` normalized coordinates as Gaussian maps.
    pub fn gaussian_maps(&mut self, coords: Node, h: usize, w: usize, sigma: f64) -> Node {
        let maps = gaussian_maps_forward(self.vals[coords.0].as3(), h, w, sigma);
        self.push(
            Op::GaussianMaps {
                coords: coords.0,
                sigma,
            },
            Val::V4(maps),
        )
    }

    pub fn seg_ce(&mut self, logits: Node, target: &Array3<u8>) -> Result<Node> {
        let (loss, probs) = seg_ce_forward(self.vals[logits.0].as4(), target)?;
        Ok(self.push(
            Op::SegCe {
                logits: logits.0,
                target: target.clone(),
                probs,
            },
            Val::S(loss),
        ))
    }

    pub fn pose_l2(
        &mut self,
        coords: Node,
        target: &Array3<f64>,
        vis: &Array2<bool>,
    ) -> Result<Node> {
        let (loss, supervised) = pose_l2_forward(self.vals[coords.0].as3(), target, vis)?;
        Ok(self.push(
            Op::PoseL2 {
                coords: coords.0,
                target: target.clone(),
                vis: vis.clone(),
                supervised,
            },
            Val::S(loss),
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn dense_loss(
        &mut self,
        part_logits: Node,
        uv: Node,
        part: &Array3<u8>,
        tuv: &Array4<f64>,
        valid: &[bool],
        form: DenseLossForm,
        delta: f64,
    ) -> Result<Node> {
        let t = kernels::DenseTargets {
            part,
            uv: tuv,
            valid,
        };
        let (loss, probs, fg, bg) =
            dense_loss_forward(self.vals[part_logits.0].as4(), self.vals[uv.0].as4(), &t, form, delta)?;
        Ok(self.push(
            Op::DenseLoss {
                logits: part_logits.0,
                uv: uv.0,
                part: part.clone(),
                tuv: tuv.clone(),
                valid: valid.to_vec(),
                form,
                delta,
                fg,
                bg,
                probs,
            },
            Val::S(loss),
        ))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Node, f64)]) -> Result<Node> {
        let mut total = 0.0;
        for (n, w) in terms {
            total += self.vals[n.0].scalar() * w;
        }
        Ok(self.push(
            Op::WeightedSum {
                terms: terms.iter().map(|(n, w)| (n.0, *w)).collect(),
            },
            Val::S(total),
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Node) -> Result<Gradients> {
        match &self.vals[loss.0] {
            Val::S(_) => {}
            _ => return Err(Error::Invalid("backward target must be scalar".into())),
        }
        let mut grads: Vec<Option<Val>> = (0..self.ops.len()).map(|_| None).collect();
        grads[loss.0] = Some(Val::S(1.0));
        for idx in (0..=loss.0).rev() {
            let op = &self.ops[idx];
            if matches!(op, Op::Input | Op::Param { .. }) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match op {
                Op::Input | Op::Param { .. } => unreachable!(),
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    dilation,
                } => {
                    let (dx, dw, db) = conv2d_backward(
                        self.vals[*x].as4(),
                        self.vals[*w].as4(),
                        g.as4(),
                        *stride,
                        *pad,
                        *dilation,
                    )?;
                    Self::acc(&mut grads, *x, Val::V4(dx));
                    Self::acc(&mut grads, *w, Val::V4(dw));
                    if let Some(bn) = b {
                        Self::acc(&mut grads, *bn, Val::V1(db));
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let gv: Vec<f64> = self.vals[*gamma].as1().to_vec();
                    let (dx, dgamma, dbeta) = bn_backward(g.as4(), &gv, cache);
                    Self::acc(&mut grads, *x, Val::V4(dx));
                    Self::acc(&mut grads, *gamma, Val::V1(Array1::from(dgamma)));
                    Self::acc(&mut grads, *beta, Val::V1(Array1::from(dbeta)));
                }
                Op::Relu { x } => {
                    let y = self.vals[idx].as4();
                    let mut dx = g.as4().clone();
                    dx.zip_mut_with(y, |d, &yv| {
                        if yv <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    Self::acc(&mut grads, *x, Val::V4(dx));
                }
                Op::Sigmoid { x } => {
                    let y = self.vals[idx].as4();
                    let mut dx = g.as4().clone();
                    dx.zip_mut_with(y, |d, &yv| *d *= yv * (1.0 - yv));
                    Self::acc(&mut grads, *x, Val::V4(dx));
                }
                Op::Add { a, b } => {
                    Self::acc(&mut grads, *a, g.clone());
                    Self::acc(&mut grads, *b, g);
                }
                Op::ConcatC { parts } => {
                    let gv = g.as4();
                    let mut off = 0;
                    for p in parts {
                        let c = self.vals[*p].as4().dim().1;
                        let piece = gv.slice(ndarray::s![.., off..off + c, .., ..]).to_owned();
                        Self::acc(&mut grads, *p, Val::V4(piece));
                        off += c;
                    }
                }
                Op::AvgPool { x, k } => {
                    Self::acc(&mut grads, *x, Val::V4(avg_pool_backward(g.as4(), *k)));
                }
                Op::Bilinear { x } => {
                    let (_, _, h, w) = self.vals[*x].as4().dim();
                    Self::acc(&mut grads, *x, Val::V4(bilinear_backward(g.as4(), h, w)));
                }
                Op::SoftArgmax { logits, probs } => {
                    let coords = self.vals[idx].as3();
                    let dl = soft_argmax_backward(g.as3(), probs, coords);
                    Self::acc(&mut grads, *logits, Val::V4(dl));
                }
                Op::GaussianMaps { coords, sigma } => {
                    let maps = self.vals[idx].as4();
                    let dc =
                        gaussian_maps_backward(g.as4(), maps, self.vals[*coords].as3(), *sigma);
                    Self::acc(&mut grads, *coords, Val::V3(dc));
                }
                Op::SegCe {
                    logits,
                    target,
                    probs,
                } => {
                    let dl = seg_ce_backward(probs, target, g.scalar());
                    Self::acc(&mut grads, *logits, Val::V4(dl));
                }
                Op::PoseL2 {
                    coords,
                    target,
                    vis,
                    supervised,
                } => {
                    let dc = pose_l2_backward(
                        self.vals[*coords].as3(),
                        target,
                        vis,
                        *supervised,
                        g.scalar(),
                    );
                    Self::acc(&mut grads, *coords, Val::V3(dc));
                }
                Op::DenseLoss {
                    logits,
                    uv,
                    part,
                    tuv,
                    valid,
                    form,
                    delta,
                    fg,
                    bg,
                    probs,
                } => {
                    let t = kernels::DenseTargets {
                        part,
                        uv: tuv,
                        valid,
                    };
                    let (dl, duv) = dense_loss_backward(
                        probs,
                        self.vals[*uv].as4(),
                        &t,
                        *form,
                        *delta,
                        *fg,
                        *bg,
                        g.scalar(),
                    );
                    Self::acc(&mut grads, *logits, Val::V4(dl));
                    Self::acc(&mut grads, *uv, Val::V4(duv));
                }
                Op::WeightedSum { terms } => {
                    let gs = g.scalar();
                    for (n, w) in terms {
                        Self::acc(&mut grads, *n, Val::S(gs * w));
                    }
                }
            }
        }
        let param_nodes = self
            .ops
            .iter()
            .enumerate()
            .filter_map(|(i, op)| match op {
                Op::Param { store_id } => Some((*store_id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, param_nodes })
    }

    fn acc(grads: &mut [Option<Val>], idx: usize, g: Val) {
        match &mut grads[idx] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}
