use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// History of generated images fed to the discriminator: once full, each
/// incoming fake is swapped for a stored one with probability 1/2.
pub struct ImagePool {
    capacity: usize,
    images: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl ImagePool {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self { capacity, images: Vec::with_capacity(capacity), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `fakes`: `n x 3 x h x w`; returns a batch of the same size, detached.
    pub fn query(&mut self, fakes: &Tensor) -> Result<Tensor> {
        let fakes = fakes.detach();
        if self.capacity == 0 {
            return Ok(fakes);
        }
        let n = fakes.dim(0)?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let img = fakes.narrow(0, i, 1)?;
            if self.images.len() < self.capacity {
                self.images.push(img.clone());
                out.push(img);
            } else if self.rng.random::<f64>() < 0.5 {
                let slot = self.rng.random_range(0..self.capacity);
                out.push(std::mem::replace(&mut self.images[slot], img));
            } else {
                out.push(img);
            }
        }
        Ok(Tensor::cat(&out, 0)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn fills_then_mixes_history() {
        let mut pool = ImagePool::new(2, 0);
        let batch = |v: f32| Tensor::full(v, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let first = pool.query(&batch(1.0)).unwrap();
        assert_eq!(first.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![1.0; 96]);
        assert_eq!(pool.len(), 2);
        let mut saw_old = false;
        for k in 0..20 {
            let out = pool.query(&batch(2.0 + k as f32)).unwrap();
            assert_eq!(out.dims(), &[2, 3, 4, 4]);
            let vals = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            saw_old |= vals.iter().any(|&v| v < 2.0 + k as f32);
        }
        assert!(saw_old);
        assert_eq!(pool.len(), 2);
    }

    #[test]
    fn zero_capacity_passes_through() {
        let mut pool = ImagePool::new(0, 0);
        let t = Tensor::ones((1, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let out = pool.query(&t).unwrap();
        assert_eq!(out.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![1.0; 48]);
    }
}
