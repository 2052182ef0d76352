//! Adam with checkpointable state.

use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{CpuStorage, DType, Device, InplaceOp2, Layout, Tensor, Var, WithDType};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Default)]
struct Moments {
    step: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Adam over every parameter of one [`ParamStore`]. Moments are kept in
/// `f32`; step counts are per parameter so parameters added by growth start
/// fresh.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    state: BTreeMap<String, Moments>,
}

/// Serializable step counts; the moment tensors travel separately.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct AdamSteps(pub BTreeMap<String, u64>);

fn update<T: WithDType>(p: &mut [T], g: &[T], s: &mut Moments, lr: f64, b1: f64, b2: f64) {
    let c1 = 1.0 - b1.powi(s.step as i32);
    let c2 = 1.0 - b2.powi(s.step as i32);
    for i in 0..p.len() {
        let gi = g[i].to_f64();
        let m = b1 * s.m[i] as f64 + (1.0 - b1) * gi;
        let v = b2 * s.v[i] as f64 + (1.0 - b2) * gi * gi;
        s.m[i] = m as f32;
        s.v[i] = v as f32;
        let step = lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
        p[i] = T::from_f64(p[i].to_f64() - step);
    }
}

/// Writes the update straight into the parameter's storage.
struct AdamUpdate<'a> {
    moments: RefCell<&'a mut Moments>,
    lr: f64,
    b1: f64,
    b2: f64,
}

impl InplaceOp2 for AdamUpdate<'_> {
    fn name(&self) -> &'static str {
        "adam-update"
    }

    fn cpu_fwd(&self, p: &mut CpuStorage, pl: &Layout, g: &CpuStorage, gl: &Layout) -> candle_core::Result<()> {
        let s = &mut *self.moments.borrow_mut();
        let (Some((p0, p1)), Some((g0, g1))) = (pl.contiguous_offsets(), gl.contiguous_offsets()) else {
            candle_core::bail!("adam-update needs contiguous tensors");
        };
        match (p, g) {
            (CpuStorage::F32(p), CpuStorage::F32(g)) => update(&mut p[p0..p1], &g[g0..g1], s, self.lr, self.b1, self.b2),
            (CpuStorage::F64(p), CpuStorage::F64(g)) => update(&mut p[p0..p1], &g[g0..g1], s, self.lr, self.b1, self.b2),
            _ => candle_core::bail!("adam-update: unsupported dtype"),
        }
        Ok(())
    }
}

fn apply(var: &Var, grad: &Tensor, s: &mut Moments, lr: f64, b1: f64, b2: f64) -> Result<()> {
    let grad = grad.to_dtype(var.dtype())?.contiguous()?;
    let op = AdamUpdate {
        moments: RefCell::new(s),
        lr,
        b1,
        b2,
    };
    var.as_tensor().inplace_op2(&grad, &op)?;
    Ok(())
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            state: BTreeMap::new(),
        }
    }

    /// Updates every parameter of `params` that has a gradient in `grads`.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        for (name, var) in params.iter() {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let n = var.elem_count();
            let s = self.state.entry(name.clone()).or_insert_with(|| Moments {
                step: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            s.step += 1;
            match var.dtype() {
                DType::F32 | DType::F64 => apply(var, grad, s, lr, self.beta1, self.beta2)?,
                other => return Err(Error::Config(format!("unsupported dtype {other:?}"))),
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> AdamSteps {
        AdamSteps(self.state.iter().map(|(k, s)| (k.clone(), s.step)).collect())
    }

    /// Moment tensors keyed `m.{name}` and `v.{name}`.
    pub fn moment_tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, s) in &self.state {
            let n = s.m.len();
            out.insert(format!("m.{name}"), Tensor::from_vec(s.m.clone(), n, &Device::Cpu)?);
            out.insert(format!("v.{name}"), Tensor::from_vec(s.v.clone(), n, &Device::Cpu)?);
        }
        Ok(out)
    }

    /// Rebuilds state from [`Adam::steps`] and [`Adam::moment_tensors`].
    pub fn restore(beta1: f64, beta2: f64, steps: &AdamSteps, moments: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut state = BTreeMap::new();
        for (name, &step) in &steps.0 {
            let get = |k: &str| -> Result<Vec<f32>> {
                let t = moments
                    .get(&format!("{k}.{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moment {k}.{name}")))?;
                Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
            };
            state.insert(name.clone(), Moments { step, m: get("m")?, v: get("v")? });
        }
        Ok(Self { beta1, beta2, state })
    }
}
