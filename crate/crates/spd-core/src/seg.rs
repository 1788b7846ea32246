//! Segmentation branch: an ASPP head over the stage-5 features produces the
//! initial mask and a context map; a coarse-to-fine refinement ladder fuses
//! that context with the initial mask and the keypoint branch's context.

use ndarray::{Array2, Array4, ArrayView3};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Node};
use crate::nn::layers::{Conv2d, ConvBnRelu, WeightInit};
use crate::nn::params::ParamStore;
use crate::types::SegMask;

/// Default dilation rates, sized to desk-scale feature maps.
pub const DEFAULT_ASPP_RATES: [usize; 3] = [1, 2, 4];

/// Atrous spatial pyramid pooling: parallel dilated convolutions plus a 1x1
/// branch, concatenated and projected back to a fixed width.
pub struct Aspp {
    branches: Vec<ConvBnRelu>,
    point: ConvBnRelu,
    project: ConvBnRelu,
    rates: Vec<usize>,
}

impl Aspp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        branch_c: usize,
        out_c: usize,
        rates: &[usize],
    ) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::Config("ASPP needs at least one rate".into()));
        }
        if let Some(&r) = rates.iter().find(|&&r| r == 0) {
            return Err(Error::Config(format!("ASPP rate must be >= 1, got {r}")));
        }
        let mut branches = Vec::with_capacity(rates.len());
        for (i, &rate) in rates.iter().enumerate() {
            branches.push(ConvBnRelu::new(
                store,
                rng,
                &format!("{name}.rate{i}"),
                in_c,
                branch_c,
                3,
                1,
                rate,
            )?);
        }
        let point = ConvBnRelu::new(store, rng, &format!("{name}.point"), in_c, branch_c, 1, 1, 1)?;
        let cat_c = branch_c * (rates.len() + 1);
        let project = ConvBnRelu::new(store, rng, &format!("{name}.project"), cat_c, out_c, 1, 1, 1)?;
        Ok(Aspp {
            branches,
            point,
            project,
            rates: rates.to_vec(),
        })
    }

    /// Fuses all branches; spatial dims are preserved.
    pub fn apply(&self, g: &mut Graph, x: Node) -> Result<Node> {
        let (_, _, h, w) = g.value(x).as4().dim();
        if let Some(&r) = self.rates.iter().find(|&&r| r > h.min(w)) {
            return Err(Error::Shape(format!(
                "ASPP rate {r} exceeds the {h}x{w} feature extent"
            )));
        }
        let mut outs = Vec::with_capacity(self.branches.len() + 1);
        for b in &self.branches {
            outs.push(b.apply(g, x)?);
        }
        outs.push(self.point.apply(g, x)?);
        let cat = g.concat_c(&outs)?;
        self.project.apply(g, cat)
    }
}

/// Nodes produced by one segmentation-branch pass.
#[derive(Clone, Copy, Debug)]
pub struct SegBranchOutput {
    /// K-channel logits at the stage-5 resolution.
    pub initial_logits: Node,
    /// Context map handed to the keypoint branch.
    pub seg_context: Node,
    /// K-channel logits at input resolution.
    pub final_logits: Node,
}

/// Two-stage segmentation head.
pub struct SegBranch {
    ctx1: ConvBnRelu,
    ctx2: ConvBnRelu,
    aspp_initial: Aspp,
    initial_head: Conv2d,
    refine: Vec<ConvBnRelu>,
    aspp_refine: Aspp,
    final_head: Conv2d,
    num_classes: usize,
    context_channels: usize,
}

impl SegBranch {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        num_classes: usize,
        context_channels: usize,
    ) -> Result<Self> {
        let ctx1 = ConvBnRelu::new(store, rng, &format!("{name}.ctx1"), in_c, 48, 3, 1, 1)?;
        let ctx2 = ConvBnRelu::new(
            store,
            rng,
            &format!("{name}.ctx2"),
            48,
            context_channels,
            3,
            1,
            1,
        )?;
        let aspp_initial = Aspp::new(
            store,
            rng,
            &format!("{name}.aspp_initial"),
            in_c,
            24,
            48,
            &DEFAULT_ASPP_RATES,
        )?;
        let initial_head = Conv2d::new(
            store,
            rng,
            &format!("{name}.initial_head"),
            48,
            num_classes,
            1,
            1,
            0,
            1,
            true,
            WeightInit::Zero,
        )?;
        let refine_in = 2 * context_channels + num_classes;
        let widths = [48, 40, 32, 24];
        let mut refine = Vec::with_capacity(widths.len());
        let mut c = refine_in;
        for (i, &w) in widths.iter().enumerate() {
            refine.push(ConvBnRelu::new(
                store,
                rng,
                &format!("{name}.refine{i}"),
                c,
                w,
                3,
                1,
                1,
            )?);
            c = w;
        }
        let aspp_refine = Aspp::new(
            store,
            rng,
            &format!("{name}.aspp_refine"),
            c,
            12,
            24,
            &DEFAULT_ASPP_RATES,
        )?;
        let final_head = Conv2d::new(
            store,
            rng,
            &format!("{name}.final_head"),
            24,
            num_classes,
            1,
            1,
            0,
            1,
            true,
            WeightInit::Zero,
        )?;
        Ok(SegBranch {
            ctx1,
            ctx2,
            aspp_initial,
            initial_head,
            refine,
            aspp_refine,
            final_head,
            num_classes,
            context_channels,
        })
    }

    /// ASPP path to the initial logits plus the two-convolution context path.
    pub fn seg_initial(&self, g: &mut Graph, res5: Node) -> Result<(Node, Node)> {
        let a = self.aspp_initial.apply(g, res5)?;
        let initial_logits = self.initial_head.apply(g, a)?;
        let c = self.ctx1.apply(g, res5)?;
        let seg_context = self.ctx2.apply(g, c)?;
        Ok((initial_logits, seg_context))
    }

    /// Refinement ladder: concatenated inputs pass four convolution levels
    /// (upsampling x2 after the first three), a second ASPP, and the final
    /// head, then a bilinear lift to `(out_h, out_w)`.
    ///
    /// `pose_context` must already sit at the stage-5 resolution; `None`
    /// substitutes a zero map of the same shape, keeping the concatenation
    /// width fixed across variants.
    pub fn seg_refine(
        &self,
        g: &mut Graph,
        seg_context: Node,
        initial_logits: Node,
        pose_context: Option<Node>,
        out_h: usize,
        out_w: usize,
    ) -> Result<Node> {
        let (b, _, h, w) = g.value(seg_context).as4().dim();
        let pose_ctx = match pose_context {
            Some(p) => p,
            None => g.input4(Array4::zeros((b, self.context_channels, h, w))),
        };
        let mut x = g.concat_c(&[seg_context, initial_logits, pose_ctx])?;
        for (i, level) in self.refine.iter().enumerate() {
            x = level.apply(g, x)?;
            if i < 3 {
                let (_, _, ch, cw) = g.value(x).as4().dim();
                x = g.bilinear(x, ch * 2, cw * 2);
            }
        }
        let x = self.aspp_refine.apply(g, x)?;
        let logits = self.final_head.apply(g, x)?;
        Ok(g.bilinear(logits, out_h, out_w))
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// Per-pixel argmax decode; ties resolve to the lowest class index.
pub fn predict_mask(logits: ArrayView3<'_, f64>) -> Result<SegMask> {
    let (k, h, w) = logits.dim();
    if k == 0 || k > 256 {
        return Err(Error::Shape(format!("cannot decode {k} classes")));
    }
    let mut data = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_v = logits[[0, y, x]];
            for c in 1..k {
                let v = logits[[c, y, x]];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            data[[y, x]] = best as u8;
        }
    }
    SegMask::new(data, k)
}
