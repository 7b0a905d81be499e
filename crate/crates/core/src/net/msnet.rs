//! Two-scale wrapping: a low-resolution branch whose stage-end features are
//! upsampled, aligned and added to the matching high-branch stage outputs.

use serde_json::json;

use super::base::BaseNetwork;
use super::graph::{align_kind, FusionGraph, NetworkGraph};
use super::session::{ParamStore, Session};
use super::spec::BaseNetworkSpec;
use super::Parameterized;
use crate::autodiff::{BatchStats, Var};
use crate::error::{Error, Result};
use crate::layers::MAX_ALIGN_DELTA;
use crate::tensor::{Scalar, Tensor};

/// Mixed into the seed of the low branch so the branches start independent
/// while the high branch matches a base network built from the same seed.
const LOW_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone)]
pub struct MsNetwork<T: Scalar = f32> {
    low: BaseNetwork<T>,
    high: BaseNetwork<T>,
    low_res: usize,
    fuse_stem: bool,
    fusion_enabled: bool,
}

/// Tape variables of one high-branch pass.
#[derive(Debug, Clone)]
pub struct HighTrace {
    pub logits: Var,
    /// High stage outputs before the fusion addition.
    pub residuals: Vec<Var>,
    /// Upsampled, aligned low features per stage (`None` where not fused).
    pub upsampled: Vec<Option<Var>>,
    /// Stage outputs after fusion (the next stage's inputs).
    pub fused: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct JointOutput {
    pub logits_low: Var,
    pub logits_high: Var,
    pub low_features: Vec<Var>,
}

/// Tensor form of [`HighTrace`].
#[derive(Debug, Clone)]
pub struct HighFeatures<T: Scalar> {
    pub logits: Tensor<T>,
    pub residuals: Vec<Tensor<T>>,
    pub upsampled: Vec<Option<Tensor<T>>>,
}

/// Builds the two-scale network for `low_res` / `2 * low_res` inputs. The
/// high branch is initialized exactly like `build_base(spec, _, seed)`.
pub fn wrap_multiscale<T: Scalar>(
    spec: &BaseNetworkSpec,
    low_res: usize,
    fuse_stem: bool,
    seed: u64,
) -> Result<MsNetwork<T>> {
    let net = MsNetwork {
        low: BaseNetwork::new(spec, "low", seed ^ LOW_SEED_SALT)?,
        high: BaseNetwork::new(spec, "high", seed)?,
        low_res,
        fuse_stem,
        fusion_enabled: true,
    };
    net.graph()?;
    Ok(net)
}

impl<T: Scalar> MsNetwork<T> {
    pub fn spec(&self) -> &BaseNetworkSpec {
        self.high.spec()
    }

    pub fn low(&self) -> &BaseNetwork<T> {
        &self.low
    }

    pub fn high(&self) -> &BaseNetwork<T> {
        &self.high
    }

    pub fn low_mut(&mut self) -> &mut BaseNetwork<T> {
        &mut self.low
    }

    pub fn high_mut(&mut self) -> &mut BaseNetwork<T> {
        &mut self.high
    }

    pub fn low_res(&self) -> usize {
        self.low_res
    }

    pub fn high_res(&self) -> usize {
        2 * self.low_res
    }

    pub fn fuse_stem(&self) -> bool {
        self.fuse_stem
    }

    pub fn num_stages(&self) -> usize {
        self.high.num_stages()
    }

    /// Turns every fusion addition on or off; off reduces the high branch to
    /// a plain single-scale network.
    pub fn set_fusion_enabled(&mut self, enabled: bool) {
        self.fusion_enabled = enabled;
    }

    pub fn fusion_enabled(&self) -> bool {
        self.fusion_enabled
    }

    /// Whether low stage `i` feeds the high branch (ignores the switch).
    pub fn is_fusion_point(&self, i: usize) -> bool {
        i < self.num_stages() && (self.fuse_stem || !self.spec().is_stem(i))
    }

    pub fn fusion_points(&self) -> Vec<usize> {
        (0..self.num_stages())
            .filter(|&i| self.is_fusion_point(i))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> MsNetwork<U> {
        MsNetwork {
            low: self.low.cast(),
            high: self.high.cast(),
            low_res: self.low_res,
            fuse_stem: self.fuse_stem,
            fusion_enabled: self.fusion_enabled,
        }
    }

    fn check_resolution(&self, x: &Tensor<T>, res: usize, op: &'static str) -> Result<()> {
        let (n, c, h, w) = x.dims4()?;
        if (h, w) != (res, res) {
            return Err(Error::ShapeMismatch {
                op,
                left: x.shape().to_vec(),
                right: vec![n, c, res, res],
            });
        }
        Ok(())
    }

    /// Low branch only; never touches high-branch parameters.
    pub fn record_low(&self, sess: &mut Session<T>, x_low: Var) -> Result<(Var, Vec<Var>)> {
        self.check_resolution(sess.tape.value(x_low)?, self.low_res, "low-resolution input")?;
        self.low.record(sess, x_low)
    }

    /// High branch given the low stage-end features.
    pub fn record_high(
        &self,
        sess: &mut Session<T>,
        x_high: Var,
        low_features: &[Var],
    ) -> Result<HighTrace> {
        self.check_resolution(
            sess.tape.value(x_high)?,
            self.high_res(),
            "high-resolution input",
        )?;
        self.high.check_channels(sess.tape.value(x_high)?)?;
        if low_features.len() != self.num_stages() {
            return Err(Error::InvalidShape(format!(
                "expected {} low stage features, got {}",
                self.num_stages(),
                low_features.len()
            )));
        }
        let stages = self.num_stages();
        let mut trace = HighTrace {
            logits: x_high,
            residuals: Vec::with_capacity(stages),
            upsampled: Vec::with_capacity(stages),
            fused: Vec::with_capacity(stages),
        };
        let mut h = x_high;
        for (i, &low) in low_features.iter().enumerate() {
            let residual = self.high.record_stage(sess, i, h)?;
            trace.residuals.push(residual);
            if self.fusion_enabled && self.is_fusion_point(i) {
                let (_, _, th, tw) = sess.tape.value(residual)?.dims4()?;
                let up = sess.tape.upsample2x(low)?;
                let up = sess.tape.align(up, th, tw)?;
                h = sess.tape.add(residual, up)?;
                trace.upsampled.push(Some(up));
            } else {
                h = residual;
                trace.upsampled.push(None);
            }
            trace.fused.push(h);
        }
        trace.logits = self.high.record_head(sess, h)?;
        Ok(trace)
    }

    /// Both branches on one tape.
    pub fn record_joint(&self, sess: &mut Session<T>, x_low: Var, x_high: Var) -> Result<JointOutput> {
        let (logits_low, low_features) = self.record_low(sess, x_low)?;
        let trace = self.record_high(sess, x_high, &low_features)?;
        Ok(JointOutput {
            logits_low,
            logits_high: trace.logits,
            low_features,
        })
    }

    /// Low logits and stage-end features, for later reuse by the high branch.
    pub fn forward_low(&self, x_low: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut sess = Session::inference();
        let x = sess.tape.constant(x_low.clone());
        let (logits, feats) = self.record_low(&mut sess, x)?;
        let feats = feats
            .iter()
            .map(|&f| sess.tape.value(f).cloned())
            .collect::<Result<_>>()?;
        Ok((sess.tape.value(logits)?.clone(), feats))
    }

    pub fn forward_high_given_low(
        &self,
        x_high: &Tensor<T>,
        low_features: &[Tensor<T>],
    ) -> Result<Tensor<T>> {
        Ok(self.high_features(x_high, low_features)?.logits)
    }

    /// High-branch logits plus its pre-fusion stage outputs and the aligned
    /// upsampled low features.
    pub fn high_features(
        &self,
        x_high: &Tensor<T>,
        low_features: &[Tensor<T>],
    ) -> Result<HighFeatures<T>> {
        let mut sess = Session::inference();
        let x = sess.tape.constant(x_high.clone());
        let feats: Vec<Var> = low_features
            .iter()
            .map(|f| sess.tape.constant(f.clone()))
            .collect();
        let trace = self.record_high(&mut sess, x, &feats)?;
        let value = |v: Var| sess.tape.value(v).cloned();
        Ok(HighFeatures {
            logits: value(trace.logits)?,
            residuals: trace
                .residuals
                .iter()
                .map(|&v| value(v))
                .collect::<Result<_>>()?,
            upsampled: trace
                .upsampled
                .iter()
                .map(|u| u.map(value).transpose())
                .collect::<Result<_>>()?,
        })
    }

    /// Monolithic forward of both branches: `(logits_low, logits_high)`.
    pub fn forward_joint(&self, x_low: &Tensor<T>, x_high: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut sess = Session::inference();
        let xl = sess.tape.constant(x_low.clone());
        let xh = sess.tape.constant(x_high.clone());
        let out = self.record_joint(&mut sess, xl, xh)?;
        Ok((
            sess.tape.value(out.logits_low)?.clone(),
            sess.tape.value(out.logits_high)?.clone(),
        ))
    }

    /// Graph at the configured resolutions.
    pub fn graph(&self) -> Result<NetworkGraph> {
        self.graph_at(self.low_res, self.high_res())
    }

    /// Graph for arbitrary input sizes; fails when a fusion point would need
    /// more than the permitted crop/pad.
    pub fn graph_at(&self, low_res: usize, high_res: usize) -> Result<NetworkGraph> {
        let low = self.low.describe("low", low_res, low_res)?;
        let high = self.high.describe("high", high_res, high_res)?;
        let mut fusion_points = Vec::new();
        for i in self.fusion_points() {
            let l = low.stages[i].out_shape;
            let h = high.stages[i].out_shape;
            if l[0] != h[0] {
                return Err(Error::InvalidSpec(format!(
                    "fusion point {i}: low branch has {} channels, high branch {}",
                    l[0], h[0]
                )));
            }
            let up = [l[0], 2 * l[1], 2 * l[2]];
            if up[1].abs_diff(h[1]) > MAX_ALIGN_DELTA || up[2].abs_diff(h[2]) > MAX_ALIGN_DELTA {
                return Err(Error::Alignment {
                    from_h: up[1],
                    from_w: up[2],
                    to_h: h[1],
                    to_w: h[2],
                });
            }
            fusion_points.push(FusionGraph {
                stage: i,
                low_shape: l,
                upsampled_shape: up,
                high_shape: h,
                align: align_kind((up[1], up[2]), (h[1], h[2])),
                macs: 0,
            });
        }
        let spec = self.spec();
        Ok(NetworkGraph {
            name: spec.name.clone(),
            multiscale: true,
            alpha: spec.alpha,
            num_classes: spec.num_classes,
            branches: vec![low, high],
            fusion_points,
        })
    }
}

impl<T: Scalar> BaseNetwork<T> {
    pub fn graph(&self, resolution: usize) -> Result<NetworkGraph> {
        let spec = self.spec();
        Ok(NetworkGraph {
            name: spec.name.clone(),
            multiscale: false,
            alpha: spec.alpha,
            num_classes: spec.num_classes,
            branches: vec![self.describe("base", resolution, resolution)?],
            fusion_points: Vec::new(),
        })
    }
}

impl<T: Scalar> Parameterized<T> for MsNetwork<T> {
    fn param_stores(&self) -> Vec<&ParamStore<T>> {
        vec![self.low.params(), self.high.params()]
    }

    fn param_stores_mut(&mut self) -> Vec<&mut ParamStore<T>> {
        vec![self.low.params_mut(), self.high.params_mut()]
    }

    fn buffer_stores(&self) -> Vec<&ParamStore<T>> {
        vec![self.low.buffers(), self.high.buffers()]
    }

    fn buffer_stores_mut(&mut self) -> Vec<&mut ParamStore<T>> {
        vec![self.low.buffers_mut(), self.high.buffers_mut()]
    }

    fn apply_bn_updates(&mut self, updates: &[(String, BatchStats<T>)]) -> Result<()> {
        self.low.apply_bn_updates(updates)?;
        self.high.apply_bn_updates(updates)
    }

    fn identity(&self) -> serde_json::Value {
        json!({
            "kind": "multiscale",
            "spec": self.spec(),
            "low_res": self.low_res,
            "high_res": self.high_res(),
            "fuse_stem": self.fuse_stem,
        })
    }
}

impl<T: Scalar> Parameterized<T> for BaseNetwork<T> {
    fn param_stores(&self) -> Vec<&ParamStore<T>> {
        vec![self.params()]
    }

    fn param_stores_mut(&mut self) -> Vec<&mut ParamStore<T>> {
        vec![self.params_mut()]
    }

    fn buffer_stores(&self) -> Vec<&ParamStore<T>> {
        vec![self.buffers()]
    }

    fn buffer_stores_mut(&mut self) -> Vec<&mut ParamStore<T>> {
        vec![self.buffers_mut()]
    }

    fn apply_bn_updates(&mut self, updates: &[(String, BatchStats<T>)]) -> Result<()> {
        BaseNetwork::apply_bn_updates(self, updates)
    }

    fn identity(&self) -> serde_json::Value {
        json!({ "kind": "base", "spec": self.spec() })
    }
}
