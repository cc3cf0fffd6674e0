use std::collections::HashMap;
use std::time::Instant;
use ptp_core::harness::{synth_chain, SynthConfig};
use ptp_core::model::{EmbedKind, PtpConfig, PtpModel, PtpVariant};
use ptp_core::sampling::AuxStream;
use ptp_core::teacher::ArModel;
use ptp_core::train::*;
use ptp_core::ArchConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tv(a: &[f64], b: &[f64]) -> f64 { a.iter().zip(b).map(|(x,y)| (x-y).abs()).sum::<f64>()/2.0 }

fn check(model: &PtpModel, chain: &ptp_core::teacher::TabularTeacher, trials: usize) -> (f64, usize, [usize;4]) {
    let mut buckets: HashMap<(usize, Vec<usize>), Vec<usize>> = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    // batch trials in chunks to use both cores via rayon inside? keep simple
    for _ in 0..trials {
        let aux = AuxStream::uniform(4, &mut rng);
        let toks = model.decode_categorical(&[], aux.values()).unwrap();
        for k in 0..4 {
            let e = buckets.entry((k, toks[..k].to_vec())).or_insert_with(|| vec![0; 25]);
            e[toks[k]] += 1;
        }
    }
    let mut worst: f64 = 0.0; let mut checked = 0; let mut per_k = [0usize; 4];
    let mut detail: Vec<(usize, Vec<usize>, usize, f64)> = Vec::new();
    for ((k, prefix), counts) in &buckets {
        let n: usize = counts.iter().sum();
        if n < 10_000 { continue; }
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        let truth = chain.next_token_dist(prefix).unwrap();
        let d = tv(&freq, truth.probs());
        detail.push((*k, prefix.clone(), n, d));
        worst = worst.max(d); checked += 1; per_k[*k] += 1;
    }
    detail.sort_by(|a, b| b.3.partial_cmp(&a.3).unwrap());
    for (k, prefix, n, d) in detail.iter().take(8) {
        println!("   k={k} prefix={prefix:?} n={n} tv={d:.4}");
    }
    (worst, checked, per_k)
}

fn main() {
    for (alpha, hidden, layers, embed, steps, lr, label) in [
        (0.12f64, 64usize, 2usize, EmbedKind::ArLin, 4000usize, 3e-3f64, "w4-a12-h64-4000-p3k"),
    ] {
        let synth = SynthConfig { states: 25, concentration: alpha, seq_len: 24, corpus_size: 1500, seed: 7 };
        let chain = synth_chain(&synth).unwrap();
        let cfg = PtpConfig {
            variant: PtpVariant::Categorical,
            window: 4,
            embed_kind: embed,
            embed_width: 32,
            arch: ArchConfig { vocab: 25, hidden, layers, heads: 2, max_seq: 48, ff: None },
        };
        let t0 = Instant::now();
        let mut model = PtpModel::new(cfg, 21).unwrap();
        let opts = DistillOptions {
            train: TrainOptions { steps, batch_size: 32, lr, clip: Some(1.0), cosine_decay: true, seed: 21, log_every: 400 },
            loss: LossKind::Kl,
            proposal: ProposalKind::Teacher,
            beta_b: 1.0,
            split: SplitPolicy::Start,
            seq_len: 4,
            pool_size: 3000,
        };
        let log = distill_train(&mut model, &chain, None, &opts).unwrap();
        let train_time = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let (worst, checked, per_k) = check(&model, &chain, 300_000);
        println!("{label}: loss {:.4}, train {:.0}s, check {:.0}s, buckets {checked} {per_k:?}, worst tv {:.4}",
                 log.rows.last().unwrap().loss, train_time, t1.elapsed().as_secs_f64(), worst);
    }
}
