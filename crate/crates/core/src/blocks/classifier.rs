use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamSet, Tensor};

/// Linear head over the unified label space. Row `c` of the weight belongs
/// to class `c`; growing appends rows and never touches existing ones.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub d: usize,
    pub weight: String,
    pub bias: String,
}

impl Classifier {
    /// Starts with zero classes.
    pub fn init(params: &mut ParamSet, prefix: &str, d: usize) -> Result<Self> {
        let weight = format!("{prefix}.weight");
        let bias = format!("{prefix}.bias");
        params.insert(&weight, Tensor::zeros(&[0, d]), true)?;
        params.insert(&bias, Tensor::zeros(&[0]), true)?;
        Ok(Self { d, weight, bias })
    }

    pub fn num_classes(&self, params: &ParamSet) -> Result<usize> {
        Ok(params.value(&self.weight)?.shape()[0])
    }

    pub fn grow<R: Rng + ?Sized>(&self, params: &mut ParamSet, new_classes: usize, rng: &mut R) -> Result<()> {
        if new_classes == 0 {
            return Err(Error::Input("classifier must grow by at least one class".into()));
        }
        let bound = 1.0 / (self.d as f64).sqrt();
        let old_w = params.value(&self.weight)?.clone();
        let old_b = params.value(&self.bias)?.clone();
        let c = old_w.shape()[0];

        let fresh_w = Tensor::uniform(&[new_classes, self.d], bound, rng);
        let fresh_b = Tensor::uniform(&[new_classes], bound, rng);
        let mut w = old_w.into_data();
        w.extend_from_slice(fresh_w.data());
        let mut b = old_b.into_data();
        b.extend_from_slice(fresh_b.data());

        params.replace(&self.weight, Tensor::new(vec![c + new_classes, self.d], w)?)?;
        params.replace(&self.bias, Tensor::new(vec![c + new_classes], b)?)?;
        Ok(())
    }

    /// `B×d` clip vectors to `B×C` logits.
    pub fn logits(&self, tape: &mut Tape, params: &ParamSet, z: Var) -> Result<Var> {
        if self.num_classes(params)? == 0 {
            return Err(Error::State("classifier has no classes".into()));
        }
        let w = tape.param(params, &self.weight)?;
        let wt = tape.transpose(w)?;
        let y = tape.matmul(z, wt)?;
        let b = tape.param(params, &self.bias)?;
        tape.add_row(y, b)
    }

    /// Logits for a single `d`-vector.
    pub fn classify(&self, params: &ParamSet, z: &Tensor) -> Result<Tensor> {
        if z.len() != self.d {
            return Err(Error::shape("classify", z.shape(), &[self.d]));
        }
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone().reshape(vec![1, self.d])?);
        let out = self.logits(&mut tape, params, zv)?;
        let c = tape.value(out).cols();
        tape.value(out).clone().reshape(vec![c])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut ps = ParamSet::new();
        let c = Classifier::init(&mut ps, "head", 3).unwrap();
        c.grow(&mut ps, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        ps.replace("head.weight", Tensor::zeros(&[2, 3])).unwrap();
        ps.replace("head.bias", Tensor::zeros(&[2])).unwrap();
        let z = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(c.classify(&ps, &z).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn one_hot_rows_select_coordinates() {
        let mut ps = ParamSet::new();
        let c = Classifier::init(&mut ps, "head", 3).unwrap();
        c.grow(&mut ps, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let w = Tensor::from_rows(&[vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]]).unwrap();
        ps.replace("head.weight", w).unwrap();
        ps.replace("head.bias", Tensor::zeros(&[2])).unwrap();
        let z = Tensor::new(vec![3], vec![1.5, -2.0, 3.25]).unwrap();
        assert_eq!(c.classify(&ps, &z).unwrap().data(), &[3.25, 1.5]);
    }

    #[test]
    fn growth_preserves_old_logits_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::new();
        let c = Classifier::init(&mut ps, "head", 5).unwrap();
        assert!(c.grow(&mut ps, 0, &mut rng).is_err());
        c.grow(&mut ps, 2, &mut rng).unwrap();
        let z = Tensor::normal(&[5], 1.0, &mut rng);
        let before = c.classify(&ps, &z).unwrap();
        c.grow(&mut ps, 2, &mut rng).unwrap();
        let after = c.classify(&ps, &z).unwrap();
        assert_eq!(after.len(), 4);
        for i in 0..2 {
            assert_eq!(before.data()[i].to_bits(), after.data()[i].to_bits());
        }
    }

    #[test]
    fn grows_from_empty_to_tcd_ucf_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let c = Classifier::init(&mut ps, "head", 4).unwrap();
        c.grow(&mut ps, 51, &mut rng).unwrap();
        assert_eq!(c.num_classes(&ps).unwrap(), 51);
        c.grow(&mut ps, 10, &mut rng).unwrap();
        assert_eq!(c.num_classes(&ps).unwrap(), 61);
    }
}
