//! Adam with decoupled weight decay.

use epmvg_core::kv::{format_f64, parse_value, KvConfig};
use epmvg_core::model::{ParamGroup, ParamSet};
use epmvg_core::numcore::Tensor;
use epmvg_core::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl KvConfig for AdamWConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "adam_beta1" => self.beta1 = parse_value(key, value)?,
            "adam_beta2" => self.beta2 = parse_value(key, value)?,
            "adam_eps" => self.eps = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(String, String)> {
        vec![
            ("adam_beta1".into(), format_f64(self.beta1)),
            ("adam_beta2".into(), format_f64(self.beta2)),
            ("adam_eps".into(), format_f64(self.eps)),
        ]
    }
}

/// First and second moments for every tensor of one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamSet<T>, config: AdamWConfig) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.tensor.shape().to_vec()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. `grad(i)` is the gradient of parameter `i` (`None` means
    /// zero), `lr(group)` its learning rate. Weight decay is applied first:
    /// `p -= lr * wd * p`, then `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn update<'g, G, L>(&mut self, params: &mut ParamSet<T>, grad: G, lr: L, weight_decay: f64) -> Result<()>
    where
        T: 'g,
        G: Fn(usize) -> Option<&'g [T]>,
        L: Fn(ParamGroup) -> f64,
    {
        if self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, parameter set has {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, e) in params.entries().iter().enumerate() {
            if self.m[i].shape() != e.tensor.shape() || self.v[i].shape() != e.tensor.shape() {
                return Err(Error::Contract(format!(
                    "optimizer state {:?} does not match parameter {} {:?}",
                    self.m[i].shape(),
                    e.name,
                    e.tensor.shape()
                )));
            }
            if let Some(g) = grad(i) {
                if g.len() != e.tensor.len() {
                    return Err(Error::Contract(format!(
                        "gradient of {} has {} values, expected {}",
                        e.name,
                        g.len(),
                        e.tensor.len()
                    )));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let eps = T::lit(c.eps);
        let one = T::one();
        for (i, e) in params.entries_mut().iter_mut().enumerate() {
            let rate = lr(e.group);
            let lr_t = T::lit(rate);
            let decay = one - T::lit(rate * weight_decay);
            let g = grad(i);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, p) in e.tensor.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(T::zero(), |g| g[j]);
                *p *= decay;
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moments as named tensors `"{prefix}m.{name}"` / `"{prefix}v.{name}"`.
    pub fn named_state(&self, params: &ParamSet<T>, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (i, e) in params.entries().iter().enumerate() {
            out.push((format!("{prefix}m.{}", e.name), self.m[i].clone()));
            out.push((format!("{prefix}v.{}", e.name), self.v[i].clone()));
        }
        out
    }

    pub fn restore(
        params: &ParamSet<T>,
        config: AdamWConfig,
        step: u64,
        prefix: &str,
        tensors: &[(String, Tensor<T>)],
    ) -> Result<Self> {
        let find = |key: String, shape: &[usize]| -> Result<Tensor<T>> {
            let t = tensors
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks optimizer tensor {key}")))?;
            if t.shape() != shape {
                return Err(Error::Format(format!("optimizer tensor {key} has shape {:?}", t.shape())));
            }
            Ok(t)
        };
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for e in params.entries() {
            m.push(find(format!("{prefix}m.{}", e.name), e.tensor.shape())?);
            v.push(find(format!("{prefix}v.{}", e.name), e.tensor.shape())?);
        }
        Ok(Self { config, step, m, v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, group: ParamGroup) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.register("p", group, Tensor::vector(vec![value]).unwrap());
        ps
    }

    #[test]
    fn zero_grad_zero_decay_is_a_no_op() {
        let mut ps = single(0.7, ParamGroup::Base);
        let mut opt = AdamW::new(&ps, AdamWConfig::default());
        let g = [0.0];
        opt.update(&mut ps, |_| Some(&g[..]), |_| 0.1, 0.0).unwrap();
        assert_eq!(ps.entries()[0].tensor.data(), &[0.7]);
    }

    #[test]
    fn decay_alone_shrinks_geometrically() {
        let mut ps = single(2.0, ParamGroup::Base);
        let mut opt = AdamW::new(&ps, AdamWConfig::default());
        for _ in 0..3 {
            opt.update(&mut ps, |_| None, |_| 0.1, 0.01).unwrap();
        }
        let expected = 2.0 * (1.0f64 - 0.1 * 0.01).powi(3);
        assert!((ps.entries()[0].tensor.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn first_step_matches_scalar_closed_form() {
        // From zero state m_hat = g, v_hat = g^2, so the step is
        // lr * g / (|g| + eps) after the decay factor.
        let (p0, g, lr, wd, eps) = (0.5f64, -0.03f64, 1e-2f64, 1e-4f64, 1e-8f64);
        let mut ps = single(p0, ParamGroup::Base);
        let mut opt = AdamW::new(&ps, AdamWConfig::default());
        let gv = [g];
        opt.update(&mut ps, |_| Some(&gv[..]), |_| lr, wd).unwrap();
        let expected = p0 * (1.0 - lr * wd) - lr * g / (g.abs() + eps);
        assert!((ps.entries()[0].tensor.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let mut ps = single(0.5, ParamGroup::Base);
        let mut opt = AdamW::new(&ps, AdamWConfig::default());
        let g = [1.0, 2.0];
        assert!(matches!(
            opt.update(&mut ps, |_| Some(&g[..]), |_| 0.1, 0.0),
            Err(Error::Contract(_))
        ));
        let mut other = ParamSet::new();
        other.register("q", ParamGroup::Base, Tensor::zeros(vec![3]));
        other.register("r", ParamGroup::Base, Tensor::zeros(vec![3]));
        assert!(matches!(opt.update(&mut other, |_| None, |_| 0.1, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn group_rates_scale_the_step() {
        let mut ps = ParamSet::new();
        ps.register("a", ParamGroup::Pretrained, Tensor::vector(vec![1.0]).unwrap());
        ps.register("b", ParamGroup::Base, Tensor::vector(vec![1.0]).unwrap());
        let mut opt = AdamW::new(&ps, AdamWConfig::default());
        let g = [0.2];
        let lr = |grp: ParamGroup| if grp == ParamGroup::Pretrained { 1e-4 } else { 1e-3 };
        for _ in 0..5 {
            opt.update(&mut ps, |_| Some(&g[..]), lr, 0.0).unwrap();
        }
        let da: f64 = 1.0 - ps.entries()[0].tensor.data()[0];
        let db = 1.0 - ps.entries()[1].tensor.data()[0];
        assert!((db / da - 10.0).abs() < 1e-9, "{}", db / da);
    }
}
