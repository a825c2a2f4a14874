//! Momentum (shadow) encoders: a frozen structural copy of the live tower,
//! nudged toward it after every optimizer step.

use crate::encoders::ParamSet;

use super::{ContrastiveError, Result};

/// A gradient-trained query tower plus its momentum-updated key shadow.
#[derive(Debug, Clone)]
pub struct MomentumPair<E: ParamSet> {
    pub query: E,
    pub key: E,
    pub momentum: f32,
}

impl<E: ParamSet + Clone> MomentumPair<E> {
    /// The key tower starts as an exact copy of the query tower with
    /// gradient tracking disabled.
    pub fn new(query: E, momentum: f32) -> Self {
        let mut key = query.clone();
        for (_, p) in key.named_params_mut() {
            p.set_requires_grad(false);
        }
        MomentumPair {
            query,
            key,
            momentum,
        }
    }

    /// θ_key ← m·θ_key + (1−m)·θ_query over every parameter.
    pub fn update(&mut self) -> Result<()> {
        momentum_update(&mut self.key, &self.query, self.momentum)
    }
}

/// Elementwise exponential moving average of `query` into `key`.
pub fn momentum_update<E: ParamSet>(key: &mut E, query: &E, m: f32) -> Result<()> {
    let q_params = query.named_params();
    let mut k_params = key.named_params_mut();
    if q_params.len() != k_params.len() {
        return Err(ContrastiveError::StructureMismatch {
            detail: format!(
                "parameter counts differ: {} vs {}",
                k_params.len(),
                q_params.len()
            ),
        });
    }
    for ((k_name, k), (q_name, q)) in k_params.iter_mut().zip(&q_params) {
        if k_name != q_name || k.shape() != q.shape() {
            return Err(ContrastiveError::StructureMismatch {
                detail: format!("{k_name} vs {q_name}"),
            });
        }
        let qd = q.data().to_vec();
        for (kv, qv) in k.data_mut().iter_mut().zip(qd) {
            *kv = m * *kv + (1.0 - m) * qv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Mlp;
    use crate::rng::{stream_rng, Stream};
    use crate::tensor::Tensor;

    fn toy_mlp(seed: u64) -> Mlp {
        let mut rng = stream_rng(seed, Stream::Init, 9);
        Mlp::init(3, 4, 2, &mut rng)
    }

    #[test]
    fn scalar_update_value() {
        let mut key = toy_mlp(1);
        let mut query = toy_mlp(1);
        for (_, p) in key.named_params_mut() {
            *p = Tensor::param(vec![1.0; p.numel()], p.shape().to_vec()).unwrap();
        }
        for (_, p) in query.named_params_mut() {
            *p = Tensor::param(vec![0.0; p.numel()], p.shape().to_vec()).unwrap();
        }
        momentum_update(&mut key, &query, 0.99).unwrap();
        for (_, p) in key.named_params() {
            for v in p.data() {
                assert!((v - 0.99).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn identical_towers_are_a_fixed_point() {
        let query = toy_mlp(2);
        let mut key = query.clone();
        let before: Vec<Vec<f32>> = key.named_params().iter().map(|(_, p)| p.data().to_vec()).collect();
        momentum_update(&mut key, &query, 0.99).unwrap();
        for ((_, p), want) in key.named_params().iter().zip(&before) {
            assert_eq!(p.data(), &want[..]);
        }
    }

    #[test]
    fn frozen_query_gives_geometric_decay() {
        // ‖θ_key − θ_query‖ shrinks by exactly m per update
        let query = toy_mlp(3);
        let mut key = toy_mlp(4);
        let m = 0.99f32;

        let dist = |key: &Mlp, query: &Mlp| -> f64 {
            let mut acc = 0.0f64;
            for ((_, k), (_, q)) in key.named_params().iter().zip(query.named_params()) {
                for (a, b) in k.data().iter().zip(q.data()) {
                    acc += ((a - b) as f64).powi(2);
                }
            }
            acc.sqrt()
        };

        let d0 = dist(&key, &query);
        for step in 1..=100 {
            momentum_update(&mut key, &query, m).unwrap();
            let want = d0 * (m as f64).powi(step);
            let got = dist(&key, &query);
            assert!(
                (got - want).abs() < 1e-6,
                "step {step}: {got} vs closed form {want}"
            );
        }
    }

    #[test]
    fn structural_mismatch_is_rejected() {
        let query = toy_mlp(5);
        let mut rng = stream_rng(6, Stream::Init, 9);
        let mut other = Mlp::init(3, 5, 2, &mut rng); // different hidden width
        assert!(matches!(
            momentum_update(&mut other, &query, 0.9),
            Err(ContrastiveError::StructureMismatch { .. })
        ));
    }

    #[test]
    fn pair_key_tower_never_tracks_gradients() {
        let pair = MomentumPair::new(toy_mlp(7), 0.99);
        for (_, p) in pair.key.named_params() {
            assert!(!p.requires_grad());
        }
        for (_, p) in pair.query.named_params() {
            assert!(p.requires_grad());
        }
    }
}
