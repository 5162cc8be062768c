#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schoolcount::imagedata::{split_dataset, LabeledSample, SplitRatios};
use schoolcount::losses::{classify_count, total_loss, CountPrediction, LossConfig};
use schoolcount::network::{forward, init, ImageTensor, ModelConfig, Params};
use schoolcount::synthgen::{generate_dataset, CountDistribution, SynthDataset, SynthSpec};
use schoolcount::trainer::{loss_and_gradient, BatchInput};

/// Smallest useful backbone, about 500 weights.
pub fn tiny_model(h: usize, w: usize) -> ModelConfig {
    ModelConfig { stage_channels: [2, 2, 3, 3, 4], blocks_per_stage: 1, input_size: (h, w), head_channels: 2 }
}

pub fn small_spec(hi: u32, seed: u64) -> SynthSpec {
    SynthSpec {
        count_distribution: CountDistribution::LogUniform { lo: 0, hi },
        image_size: (64, 128),
        blob_length: (3.0, 5.0),
        seed,
        ..Default::default()
    }
}

pub fn dataset(spec: &SynthSpec, n_labelled: usize, n_unlabelled: usize) -> SynthDataset {
    generate_dataset(spec, n_labelled, n_unlabelled).unwrap()
}

pub struct Splits {
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

/// Stratified 70/14/16 split by count class.
pub fn split(samples: &[LabeledSample], seed: u64) -> Splits {
    let ids: Vec<String> = samples.iter().map(|s| s.id().to_string()).collect();
    let strata: Vec<u32> = samples.iter().map(|s| classify_count(s.count() as f64) as u32).collect();
    let sp = split_dataset(&ids, &strata, SplitRatios::default(), seed).unwrap();
    let pick = |part: &[String]| -> Vec<LabeledSample> {
        part.iter().map(|id| samples[ids.iter().position(|x| x == id).unwrap()].clone()).collect()
    };
    Splits { train: pick(&sp.train), val: pick(&sp.val), test: pick(&sp.test) }
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor<f64> {
    ImageTensor { height: h, width: w, data: (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect() }
}

/// Initialised parameters with a random perturbation so every tensor,
/// including the zero-initialised ones, carries signal.
pub fn perturbed_params(config: &ModelConfig, seed: u64) -> Params<f64> {
    let mut p = init(config, seed).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in p.tensors.iter_mut().filter(|t| t.trainable) {
        for v in t.data.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    p
}

/// Three labelled images far from their predictions and two pairs whose
/// hinge is active.
pub fn check_batch(params: &Params<f64>, seed: u64) -> BatchInput<f64> {
    let (h, w) = params.config.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labelled = (0..3).map(|i| (random_image(&mut rng, h, w), 40.0 + 30.0 * i as f64)).collect();
    let pairs = (0..2)
        .map(|_| {
            let a = random_image(&mut rng, h, w);
            let b = random_image(&mut rng, h, w);
            let pa = forward(params, &a).unwrap().0.gap_count();
            let pb = forward(params, &b).unwrap().0.gap_count();
            if pa < pb {
                (a, b)
            } else {
                (b, a)
            }
        })
        .collect();
    BatchInput { labelled, pairs }
}

/// Batch loss recomputed from forward passes only, with the joint ReLU
/// activation pattern of every image.
pub fn loss_only(params: &Params<f64>, cfg: &LossConfig, batch: &BatchInput<f64>) -> (f64, Vec<bool>) {
    let mut pattern = Vec::new();
    let mut labelled = Vec::new();
    for (x, c) in &batch.labelled {
        let (o, t) = forward(params, x).unwrap();
        pattern.extend(t.relu_pattern());
        labelled.push(CountPrediction { c: *c, c_hat: o.count(), logvar: o.logvar() });
    }
    let mut pairs = Vec::new();
    if cfg.use_rank {
        for (a, b) in &batch.pairs {
            let (oa, ta) = forward(params, a).unwrap();
            let (ob, tb) = forward(params, b).unwrap();
            pattern.extend(ta.relu_pattern());
            pattern.extend(tb.relu_pattern());
            pairs.push((oa.gap_count(), ob.gap_count()));
        }
    }
    (total_loss(cfg, &labelled, &pairs).unwrap().total, pattern)
}

#[derive(Debug, Default)]
pub struct GradCheck {
    pub elements: usize,
    pub max_rel: f64,
    pub worst: String,
    /// Elements whose stencil had to shrink to avoid a ReLU kink.
    pub shrunk: usize,
    /// Elements where no stencil down to the floor avoided a kink.
    pub unresolved: usize,
}

/// Central differences against the analytic gradient. Starts at `h` and
/// divides by ten whenever the perturbation flips a rectifier, since the
/// loss is only piecewise smooth there.
pub fn gradient_check(params: &Params<f64>, cfg: &LossConfig, batch: &BatchInput<f64>, h: f64) -> GradCheck {
    let (_, grads) = loss_and_gradient(params, cfg, batch).unwrap();
    let (_, base) = loss_only(params, cfg, batch);
    let mut p = params.clone();
    let mut out = GradCheck::default();
    for ti in 0..p.tensors.len() {
        if !p.tensors[ti].trainable {
            continue;
        }
        for j in 0..p.tensors[ti].data.len() {
            let orig = p.tensors[ti].data[j];
            let mut step = h;
            let fd = loop {
                p.tensors[ti].data[j] = orig + step;
                let (lp, pp) = loss_only(&p, cfg, batch);
                p.tensors[ti].data[j] = orig - step;
                let (lm, pm) = loss_only(&p, cfg, batch);
                p.tensors[ti].data[j] = orig;
                let stable = pp == base && pm == base;
                if stable || step < h * 1e-5 {
                    if step < h {
                        out.shrunk += 1;
                    }
                    if !stable {
                        out.unresolved += 1;
                    }
                    break (lp - lm) / (2.0 * step);
                }
                step /= 10.0;
            };
            let an = grads.tensors[ti].data[j];
            let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-8);
            out.elements += 1;
            if rel > out.max_rel {
                out.max_rel = rel;
                out.worst = format!("{}[{j}] analytic {an:.6e} numeric {fd:.6e}", p.tensors[ti].name);
            }
        }
    }
    out
}
