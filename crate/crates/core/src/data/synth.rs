//! Synthetic frame features whose class identity lives only in temporal
//! order.
//!
//! A shared bank of `L` unit-norm prototypes is generated once per seed.
//! Every class shows all `L` prototypes exactly once, in a class-specific
//! order, so any order-insensitive summary of a clip (a mean over frames,
//! say) carries no class information. Each frame also carries a
//! class-independent code for its time step, then i.i.d. Gaussian noise.
//!
//! Class orders come from the affine family `t ↦ σ((a·t + b) mod L)` with
//! `a` a unit mod `L`: consecutive class ids share `a` and differ in `b`, so
//! within any block of `L` consecutive classes no two show the same
//! prototype at the same time step. Ids beyond the family fall back to
//! seeded random orders distinct from all earlier classes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Clip, FeatureDataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub d: usize,
    pub clip_len: usize,
    /// Size of the label range; class ids are `0..num_classes`.
    pub num_classes: usize,
    /// Noise std relative to the (unit) prototype norm.
    pub noise_sigma: f64,
    /// Norm of the per-time-step code added to every frame.
    pub position_scale: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            d: 32,
            clip_len: 8,
            num_classes: 12,
            noise_sigma: 0.1,
            position_scale: 1.0,
            train_per_class: 40,
            test_per_class: 20,
            seed: 0,
        }
    }
}

const STREAM_BANK: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_CLIPS: u64 = 1 << 20;

/// Shared ingredients, fixed by the seed.
struct Bank {
    prototypes: Vec<Vec<f64>>,
    position_codes: Vec<Vec<f64>>,
    orders: Vec<Vec<usize>>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn unit_vectors(n: usize, d: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm * scale).collect()
        })
        .collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Temporal prototype order for every class id below `num_classes`.
pub fn class_orders(clip_len: usize, num_classes: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = rng_for(seed, STREAM_ORDER);
    let mut sigma: Vec<usize> = (0..clip_len).collect();
    sigma.shuffle(&mut rng);
    let units: Vec<usize> = (1..clip_len.max(2)).filter(|&a| gcd(a, clip_len) == 1).collect();
    let units = if units.is_empty() { vec![1] } else { units };

    let mut orders: Vec<Vec<usize>> = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let family = c / clip_len;
        let order = if family < units.len() {
            let (a, b) = (units[family], c % clip_len);
            (0..clip_len).map(|t| sigma[(a * t + b) % clip_len]).collect()
        } else {
            loop {
                let mut p: Vec<usize> = (0..clip_len).collect();
                p.shuffle(&mut rng);
                if !orders.contains(&p) {
                    break p;
                }
            }
        };
        orders.push(order);
    }
    orders
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.clip_len == 0 || self.num_classes == 0 {
            return Err(Error::config("synth", "d, clip length and class count must be positive"));
        }
        if !(self.noise_sigma >= 0.0) || !(self.position_scale >= 0.0) {
            return Err(Error::config("noise_sigma", "noise and position scale must be >= 0"));
        }
        let distinct: u128 = (1..=self.clip_len as u128).product();
        if (self.num_classes as u128) > distinct {
            return Err(Error::config(
                "classes",
                format!("{} classes exceed the {distinct} orders of {} frames", self.num_classes, self.clip_len),
            ));
        }
        Ok(())
    }

    fn bank(&self) -> Bank {
        let mut rng = rng_for(self.seed, STREAM_BANK);
        let prototypes = unit_vectors(self.clip_len, self.d, 1.0, &mut rng);
        let position_codes = unit_vectors(self.clip_len, self.d, self.position_scale, &mut rng);
        Bank {
            prototypes,
            position_codes,
            orders: class_orders(self.clip_len, self.num_classes, self.seed),
        }
    }

    /// Noise-free `L×d` template of a class.
    pub fn template(&self, class: usize) -> Result<Tensor> {
        self.validate()?;
        if class >= self.num_classes {
            return Err(Error::Input(format!("class {class} outside 0..{}", self.num_classes)));
        }
        let bank = self.bank();
        Ok(render(&bank, class, self.d, None))
    }
}

fn render(bank: &Bank, class: usize, d: usize, noise: Option<(&Normal<f64>, &mut ChaCha8Rng)>) -> Tensor {
    let order = &bank.orders[class];
    let mut data = Vec::with_capacity(order.len() * d);
    let mut noise = noise;
    for (t, &p) in order.iter().enumerate() {
        for j in 0..d {
            let mut v = bank.prototypes[p][j] + bank.position_codes[t][j];
            if let Some((dist, rng)) = noise.as_mut() {
                v += dist.sample(*rng);
            }
            // stored features are 32-bit; keep generated values exactly representable
            data.push(v as f32 as f64);
        }
    }
    Tensor::new(vec![order.len(), d], data).expect("L×d")
}

/// Clips of the given classes for one split. Each clip depends only on
/// `(seed, class, split, index)`, so any subset of classes reproduces the
/// same clips.
pub fn gen_split(spec: &SynthSpec, class_ids: &[usize], split: Split) -> Result<FeatureDataset> {
    spec.validate()?;
    if let Some(&bad) = class_ids.iter().find(|&&c| c >= spec.num_classes) {
        return Err(Error::Input(format!("class {bad} outside 0..{}", spec.num_classes)));
    }
    let bank = spec.bank();
    let per_class = match split {
        Split::Train => spec.train_per_class,
        Split::Test => spec.test_per_class,
    };
    let split_bit: u64 = if split == Split::Test { 1 } else { 0 };
    let dist = Normal::new(0.0, spec.noise_sigma / (spec.d as f64).sqrt()).expect("sigma >= 0");
    let mut clips = Vec::with_capacity(class_ids.len() * per_class);
    for &c in class_ids {
        let mut rng = rng_for(spec.seed, STREAM_CLIPS + 2 * c as u64 + split_bit);
        for i in 0..per_class {
            let features = if spec.noise_sigma > 0.0 {
                render(&bank, c, spec.d, Some((&dist, &mut rng)))
            } else {
                render(&bank, c, spec.d, None)
            };
            clips.push(Clip {
                features,
                label: c,
                clip_id: ((c as u64) << 32) | (split_bit << 31) | i as u64,
            });
        }
    }
    FeatureDataset::new(spec.d, spec.clip_len, split, clips)
}

pub struct TaskData {
    pub train: FeatureDataset,
    pub test: FeatureDataset,
}

pub fn gen_task(spec: &SynthSpec, class_ids: &[usize]) -> Result<TaskData> {
    Ok(TaskData {
        train: gen_split(spec, class_ids, Split::Train)?,
        test: gen_split(spec, class_ids, Split::Test)?,
    })
}
