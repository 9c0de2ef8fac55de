use super::params::ParamStore;
use super::real::Real;
use super::tensor::Tensor;
use super::TensorError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments kept in `f64`, one buffer per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Real>(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect::<Vec<_>>();
        AdamState { config, step: 0, m: zeros(), v: zeros() }
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn update<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<f64>) -> Result<(), TensorError> {
        params.check_layout(grads)?;
        if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, (_, p))| m.len() != p.len()) {
            return Err(TensorError::InvalidArgument("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let names: Vec<String> = params.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let g = grads.get(name).expect("layout checked").data();
            let p = params.get_mut(name).expect("layout checked").data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] = T::from_f64(p[j].to_f64() - lr * mhat / (vhat.sqrt() + eps));
            }
        }
        Ok(())
    }

    /// Moment buffers as tensors shaped like `params`, for checkpointing.
    pub fn moments<T: Real>(&self, params: &ParamStore<T>) -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
        let shape_of = |i: usize| params.iter().nth(i).map(|(_, t)| t.shape().to_vec()).unwrap_or_default();
        let wrap = |bufs: &Vec<Vec<f64>>| {
            bufs.iter().enumerate().map(|(i, b)| Tensor::new(shape_of(i), b.clone()).expect("moment shape")).collect()
        };
        (wrap(&self.m), wrap(&self.v))
    }

    pub fn from_moments(config: AdamConfig, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Self {
        AdamState { config, step, m, v }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_f64(&[1], &[v]).unwrap());
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(0.7);
        let mut st = AdamState::new(&p, AdamConfig::default());
        st.update(&mut p, &single(0.0)).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_matches_hand_formula() {
        let mut p = single(1.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        st.update(&mut p, &single(0.5)).unwrap();
        // m = 0.05, v = 0.00025; mhat = 0.5, vhat = 0.25.
        let expect = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - expect).abs() < 1e-15);
        st.update(&mut p, &single(-0.25)).unwrap();
        let m: f64 = 0.9 * 0.05 + 0.1 * -0.25;
        let v: f64 = 0.999 * 0.00025 + 0.001 * 0.0625;
        let mhat = m / (1.0 - 0.81);
        let vhat = v / (1.0 - 0.999f64.powi(2));
        let expect2 = expect - 1e-3 * mhat / (vhat.sqrt() + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - expect2).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_moves_by_step_size() {
        let mut p = single(0.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        let mut prev = 0.0;
        for _ in 0..500 {
            st.update(&mut p, &single(3.0)).unwrap();
            let cur = p.get("w").unwrap().data()[0];
            let delta = cur - prev;
            assert!(delta < 0.0);
            assert!((delta + 1e-3).abs() < 1e-6);
            prev = cur;
        }
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let mut p = single(0.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        let mut g = ParamStore::new();
        g.insert("w", Tensor::<f64>::zeros(&[2]));
        assert!(st.update(&mut p, &g).is_err());
    }
}
