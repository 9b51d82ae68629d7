//! LAMB: Adam moments with a per-tensor trust ratio.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Upper clip for the trust ratio (lower clip is 0).
    pub max_trust: f64,
    /// Forces the trust ratio to 1, which turns the update into AdamW.
    pub unit_trust: bool,
}

impl Default for LambConfig {
    fn default() -> Self {
        LambConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            max_trust: 10.0,
            unit_trust: false,
        }
    }
}

/// First/second moments per parameter tensor and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Element = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        OptimizerState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn matches(&self, params: &[Tensor<T>]) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| p.shape() == m.shape() && p.shape() == v.shape())
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LambStats {
    pub grad_norm: f64,
    /// Trust ratio applied to each tensor.
    pub trust: Vec<f64>,
}

/// Weight decay only touches matrices and kernels, not biases or norm gains.
fn decays(shape: &[usize]) -> bool {
    shape.len() >= 2
}

/// One LAMB update of `params` in place. `names` labels tensors in error
/// messages. A non-finite gradient aborts before anything is modified.
pub fn lamb_step<T: Element>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    names: &[String],
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &LambConfig,
) -> Result<LambStats> {
    if grads.len() != params.len() || !state.matches(params) {
        return Err(Error::Config(
            "optimizer state does not match the parameters".into(),
        ));
    }
    let mut sq = 0.0;
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if g.shape() != p.shape() {
            return Err(Error::Config(format!(
                "gradient shape {:?} for parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if let Some(bad) = g.data().iter().position(|v| !v.as_f64().is_finite()) {
            let name = names.get(i).map(String::as_str).unwrap_or("?");
            return Err(Error::Numeric(format!(
                "non-finite gradient at step {}: {}[{}] = {}",
                state.step + 1,
                name,
                bad,
                g.data()[bad].as_f64()
            )));
        }
        sq += g.norm_f64().powi(2);
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let mut stats = LambStats {
        grad_norm: sq.sqrt(),
        trust: Vec::with_capacity(params.len()),
    };
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let wd = if decays(p.shape()) {
            cfg.weight_decay
        } else {
            0.0
        };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let mut update = Vec::with_capacity(p.numel());
        for (j, (&pj, &gj)) in p.data().iter().zip(g.data()).enumerate() {
            let gj = gj.as_f64();
            let mj = cfg.beta1 * m[j].as_f64() + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * v[j].as_f64() + (1.0 - cfg.beta2) * gj * gj;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            update.push((mj / bc1) / ((vj / bc2).sqrt() + cfg.eps) + wd * pj.as_f64());
        }
        let trust = if cfg.unit_trust {
            1.0
        } else {
            let pn = p.norm_f64();
            let un = update.iter().map(|u| u * u).sum::<f64>().sqrt();
            if pn > 0.0 && un > 0.0 {
                (pn / un).clamp(0.0, cfg.max_trust)
            } else {
                1.0
            }
        };
        stats.trust.push(trust);
        if lr == 0.0 {
            continue;
        }
        for (pj, u) in p.data_mut().iter_mut().zip(&update) {
            *pj = T::of(pj.as_f64() - lr * trust * u);
        }
    }
    Ok(stats)
}
