//! Concurrent channel and spatial excitation (CSSE).
//!
//! The channel branch squeezes the map by global average pooling, runs two
//! fully connected layers (width `ceil(C/2)` then `C`) and a sigmoid, and
//! rescales each channel. The spatial branch is a 1×1 convolution to one
//! channel followed by a sigmoid, rescaling each location. The block output
//! is the elementwise maximum of the two recalibrated maps.

use rand::Rng;

use crate::error::Result;
use crate::layers::Conv;
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Csse {
    fc1: Conv,
    fc2: Conv,
    spatial: Conv,
}

impl Csse {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let squeezed = channels.div_ceil(2);
        Self {
            fc1: Conv::new(store, &format!("{name}.fc1"), channels, squeezed, 1, 1, rng),
            fc2: Conv::new(store, &format!("{name}.fc2"), squeezed, channels, 1, 1, rng),
            spatial: Conv::new(store, &format!("{name}.spatial"), channels, 1, 1, 1, rng),
        }
    }

    /// Per-channel gates, shape `[C, 1, 1]`.
    pub fn channel_gates<T: Scalar>(&self, b: &Binding<'_, T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        let v = f.global_avg_pool()?;
        let hidden = self.fc1.forward(b, &v)?;
        Ok(self.fc2.forward(b, &hidden)?.sigmoid())
    }

    /// Per-location gates, shape `[1, H, W]`.
    pub fn spatial_gates<T: Scalar>(&self, b: &Binding<'_, T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.spatial.forward(b, f)?.sigmoid())
    }

    pub fn channel_attention<T: Scalar>(&self, b: &Binding<'_, T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        f.mul(&self.channel_gates(b, f)?)
    }

    pub fn spatial_attention<T: Scalar>(&self, b: &Binding<'_, T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        f.mul(&self.spatial_gates(b, f)?)
    }

    pub fn forward<T: Scalar>(&self, b: &Binding<'_, T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        self.channel_attention(b, f)?.maximum(&self.spatial_attention(b, f)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.fc1, &self.fc2, &self.spatial].iter().flat_map(|c| c.params()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block(channels: usize, seed: u64) -> (ParamStore<f64>, Csse) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let csse = Csse::new(&mut store, "att", channels, &mut rng);
        (store, csse)
    }

    fn random(shape: &[usize], seed: u64, lo: f64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(lo..1.0))
    }

    #[test]
    fn zero_input_half_gates() {
        let (store, csse) = block(8, 1);
        let b = Binding::frozen(&store);
        let f = Tensor::constant(ArrayD::zeros(IxDyn(&[8, 4, 4])));
        let gates = csse.channel_gates(&b, &f).unwrap();
        assert!(gates.value().iter().all(|&g| g == 0.5));
        let s = csse.spatial_gates(&b, &f).unwrap();
        assert_eq!(s.shape(), &[1, 4, 4]);
        assert!(s.value().iter().all(|&g| g == 0.5));
        for out in [
            csse.channel_attention(&b, &f).unwrap(),
            csse.spatial_attention(&b, &f).unwrap(),
            csse.forward(&b, &f).unwrap(),
        ] {
            assert_eq!(out.shape(), &[8, 4, 4]);
            assert!(out.value().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn odd_channel_count() {
        let (store, csse) = block(5, 2);
        let f = Tensor::constant(random(&[5, 3, 3], 3, -1.0));
        let out = csse.forward(&Binding::frozen(&store), &f).unwrap();
        assert_eq!(out.shape(), &[5, 3, 3]);
        assert_eq!(store.value(csse.fc1.weight).shape(), &[3, 5, 1, 1]);
    }

    #[test]
    fn max_of_equal_branches_is_either() {
        let a = Tensor::constant(random(&[2, 3, 3], 4, -1.0));
        assert_eq!(a.maximum(&a).unwrap().value(), a.value());
    }

    #[test]
    fn large_map_shape() {
        let mut store = ParamStore::<f32>::new();
        let csse = Csse::new(&mut store, "a", 512, &mut ChaCha8Rng::seed_from_u64(0));
        let f = Tensor::constant(ArrayD::from_elem(IxDyn(&[512, 96, 128]), 0.25f32));
        let out = csse.forward(&Binding::frozen(&store), &f).unwrap();
        assert_eq!(out.shape(), &[512, 96, 128]);
    }

    /// Every parameter and input gradient of sum(csse(F) ⊙ R) against
    /// central differences on a (4, 5, 6) input.
    #[test]
    fn gradients_match_finite_differences() {
        let (mut store, csse) = block(4, 5);
        let input = store.add("input", random(&[4, 5, 6], 6, -1.0));
        let probe = random(&[4, 5, 6], 7, -1.0);
        let objective = |store: &ParamStore<f64>| {
            let b = Binding::tracked(store);
            let out = csse.forward(&b, &b.get(input)).unwrap();
            out.mul(&Tensor::constant(probe.clone())).unwrap().sum()
        };
        let grads = objective(&store).backward(store.len());
        let eps = 1e-4;
        for id in store.ids().collect::<Vec<_>>() {
            let analytic = grads.get(id).expect("every parameter is used").clone();
            let mut worst: f64 = 0.0;
            for i in 0..analytic.len() {
                let orig = store.value(id).as_slice().unwrap()[i];
                store.value_mut(id).as_slice_mut().unwrap()[i] = orig + eps;
                let up = objective(&store).item();
                store.value_mut(id).as_slice_mut().unwrap()[i] = orig - eps;
                let down = objective(&store).item();
                store.value_mut(id).as_slice_mut().unwrap()[i] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic.as_slice().unwrap()[i];
                let denom = a.abs().max(numeric.abs());
                if denom > 1e-10 {
                    worst = worst.max((a - numeric).abs() / denom);
                }
            }
            assert!(worst < 1e-3, "{}: relative error {worst}", store.name(id));
        }
    }

    proptest! {
        #[test]
        fn gates_in_open_unit_interval(seed in 0u64..500, scale in 0.1f64..5.0) {
            let (store, csse) = block(6, seed);
            let f = Tensor::constant(random(&[6, 4, 5], seed + 1, -1.0).mapv(|v| v * scale));
            let b = Binding::frozen(&store);
            for g in csse.channel_gates(&b, &f).unwrap().value().iter()
                .chain(csse.spatial_gates(&b, &f).unwrap().value().iter()) {
                prop_assert!(*g > 0.0 && *g < 1.0);
            }
        }

        #[test]
        fn nonnegative_input_bounds(seed in 0u64..500) {
            let (store, csse) = block(6, seed);
            let x = random(&[6, 4, 5], seed + 9, 0.0);
            let out = csse.forward(&Binding::frozen(&store), &Tensor::constant(x.clone())).unwrap();
            for (o, i) in out.value().iter().zip(x.iter()) {
                prop_assert!(*o >= 0.0 && *o <= *i);
            }
        }
    }
}
