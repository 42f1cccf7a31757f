//! Acceptance harness. Prints one `PASS`/`FAIL` line per criterion and a
//! summary. The exit status is zero unless `DREAMNET_ACCEPTANCE_STRICT=1`,
//! so a failing criterion is reported without breaking the unit test run.
//! `DREAMNET_ACCEPTANCE_ONLY=grad,auc,...` restricts the run to a subset.

use std::collections::BTreeSet;
use std::f64::consts::{LN_2, PI};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dreamnet::checkpoint::Checkpoint;
use dreamnet::dataset::{emotion_index, generate, split, theme_index, DreamRecord, GeneratorSpec};
use dreamnet::eeg::{band_power, bandpass, welch_psd, BandFeatures, FeatureConfig, BANDS};
use dreamnet::evaluation::{auc, evaluate, pearson_permutation, Experiment, RuleBaseline, Variant, MIN_PERMUTATIONS};
use dreamnet::gradcheck::Coverage;
use dreamnet::model::{Fusion, Mode, Model, ModelConfig, Temporal};
use dreamnet::text::{mask_tokens, tokenize, TokenSequence, Vocab, MASK};
use dreamnet::training::{build_samples, finetune_observed, grad_check_fixture, grad_check_model, pretrain, total_loss, Sample, TrainConfig};

// gradient check
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;
const GRAD_COORDS_PER_TENSOR: usize = 40;
const GRAD_BUDGET_SECS: f64 = 60.0;
// loss arithmetic
const LOSS_TOL: f64 = 1e-9;
// attention
const ATTN_PASSES: usize = 1000;
const ATTN_TOL: f64 = 1e-9;
// overfit
const OVERFIT_RECORDS: usize = 32;
const OVERFIT_D_MODEL: usize = 32;
const OVERFIT_MAX_EPOCHS: usize = 200;
const OVERFIT_MIN_F1: f64 = 0.99;
const OVERFIT_BUDGET_SECS: f64 = 300.0;
// experiments
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const EXP_RECORDS: usize = 500;
const MULTIMODAL_MIN_GAIN: f64 = 0.05;
const MULTIMODAL_MIN_SEEDS: usize = 4;
const MULTIMODAL_BUDGET_SECS: f64 = 30.0 * 60.0;
const ABLATION_MIN_SEEDS: usize = 4;
const RULE_MIN_SEEDS: usize = 5;
// correlation
const CORR_N: usize = 1500;
const CORR_TARGET: f64 = 0.9;
const CORR_TOL: f64 = 0.1;
const CORR_MAX_P: f64 = 0.01;
// auc
const AUC_CASES: usize = 100;
const AUC_MAX_N: usize = 200;
// dsp
const FS: f64 = 256.0;
const PASS_GAIN_TOL: f64 = 0.01;
const STOP_MAX_RMS: f64 = 0.01;
const ALPHA_MIN_SHARE: f64 = 0.95;
// split
const SPLIT_N: usize = 1500;
const SPLIT_COUNTS: (usize, usize, usize) = (1050, 300, 150);
// masking
const MASK_RATE: f64 = 0.15;
const MASK_POSITIONS: usize = 10_000;
const MASK_RANGE: (f64, f64) = (0.14, 0.16);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Check = fn(&mut Shared) -> Outcome;

fn main() {
    let only: Option<BTreeSet<String>> = std::env::var("DREAMNET_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let strict = std::env::var("DREAMNET_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let checks: [(&str, Check); 12] = [
        ("grad", grad_check),
        ("loss", loss_arithmetic),
        ("attention", attention_normalization),
        ("overfit", overfit),
        ("multimodal", multimodal_gain),
        ("ablation", ablation_ordering),
        ("correlation", correlation_recovery),
        ("auc", auc_oracle),
        ("dsp", dsp),
        ("split", split_exactness),
        ("masking", masking_rate),
        ("rule", rule_baseline),
    ];
    let mut shared = Shared::default();
    let mut failed = Vec::new();
    let mut ran = 0;
    for (name, check) in checks {
        if only.as_ref().is_some_and(|o| !o.contains(name)) {
            continue;
        }
        let t = Instant::now();
        let o = check(&mut shared);
        ran += 1;
        println!(
            "{} {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(name);
        }
    }
    println!("acceptance: {}/{ran} passed", ran - failed.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        if strict {
            std::process::exit(1);
        }
    }
}

fn grad_check(_: &mut Shared) -> Outcome {
    let cfg = ModelConfig {
        vocab_size: 30,
        d_model: 16,
        n_layers: 2,
        n_heads_text: 2,
        ff_dim: 32,
        max_len: 12,
        phys_tokens: 4,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let t = Instant::now();
    let (model, sample) = grad_check_fixture(&cfg, 0).unwrap();
    let r = grad_check_model(&model, &sample, &TrainConfig::default(), GRAD_EPS, Coverage::Sampled(GRAD_COORDS_PER_TENSOR)).unwrap();
    let secs = t.elapsed().as_secs_f64();
    outcome(
        r.max_rel_error < GRAD_REL_TOL && secs < GRAD_BUDGET_SECS,
        format!(
            "max relative error {:.2e} over {} coordinates in {} tensors, {secs:.1}s",
            r.max_rel_error,
            r.coords_checked,
            model.params.len()
        ),
    )
}

fn loss_arithmetic(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 5;
    let half_e = vec![vec![0.5; 8]; n];
    let half_s = vec![vec![0.5; 12]; n];
    let gold_e: Vec<Vec<f64>> = (0..n).map(|_| (0..8).map(|_| f64::from(rng.random_bool(0.5))).collect()).collect();
    let gold_s: Vec<Vec<f64>> = (0..n).map(|_| (0..12).map(|_| f64::from(rng.random_bool(0.5))).collect()).collect();
    let got = total_loss(&half_e, &half_s, &gold_e, &gold_s, 1.0, 1.0, 1e-7).unwrap();
    let want = 20.0 * LN_2;
    outcome((got - want).abs() <= LOSS_TOL, format!("{got:.12} vs {want:.12}"))
}

fn attention_normalization(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_sum = 0.0f64;
    let mut min_weight = f64::INFINITY;
    let mut model = None;
    for pass in 0..ATTN_PASSES {
        if pass % 100 == 0 {
            let cfg = ModelConfig {
                vocab_size: 40,
                d_model: 16,
                n_heads_text: 2,
                ff_dim: 32,
                max_len: 16,
                temporal: if pass % 200 == 0 { Temporal::BiLstm } else { Temporal::MeanPool },
                ..ModelConfig::default()
            };
            model = Some(Model::new(cfg, &mut rng).unwrap());
        }
        let m = model.as_ref().unwrap();
        let len = rng.random_range(1..=m.config.max_len);
        let mut ids = vec![dreamnet::text::CLS];
        ids.extend((1..len).map(|_| rng.random_range(4..m.config.vocab_size)));
        ids.resize(m.config.max_len, dreamnet::text::PAD);
        let seq = TokenSequence { ids, true_len: len };
        let values: Vec<f64> = match pass % 10 {
            0 => vec![0.0; m.config.feature_dim],
            1 => vec![1.0; m.config.feature_dim],
            _ => (0..m.config.feature_dim).map(|_| rng.random::<f64>()).collect(),
        };
        let p = m.forward(&seq, Some(&BandFeatures { values }), Mode::Eval).unwrap();
        let rows = p.attention.expect("fusion ran");
        assert_eq!(rows.len(), m.config.fusion_heads);
        for row in rows {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            min_weight = row.iter().copied().fold(min_weight, f64::min);
        }
    }
    outcome(
        worst_sum <= ATTN_TOL && min_weight >= 0.0,
        format!("{ATTN_PASSES} passes, max |sum - 1| {worst_sum:.1e}, min weight {min_weight:.3e}"),
    )
}

fn narrative_spec(n: usize, seed: u64, eeg_fraction: f64) -> GeneratorSpec {
    GeneratorSpec {
        n,
        seed,
        mean_words: 20.0,
        sd_words: 5.0,
        min_words: 8,
        eeg_fraction,
        ..GeneratorSpec::default()
    }
}

const EXP_MAX_LEN: usize = 48;

fn small_model(vocab_size: usize, d_model: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d_model,
        n_heads_text: 2,
        ff_dim: 2 * d_model,
        max_len: EXP_MAX_LEN,
        ..ModelConfig::default()
    }
}

fn micro_f1(model: &Model, samples: &[Sample]) -> f64 {
    evaluate(model, samples, 0.5).unwrap().f1
}

fn overfit(_: &mut Shared) -> Outcome {
    let t = Instant::now();
    let data = generate(&narrative_spec(OVERFIT_RECORDS, 3, 0.0)).unwrap();
    let texts: Vec<&str> = data.records.iter().map(|r| r.text.as_str()).collect();
    let vocab = Vocab::build(&texts, 1).unwrap();
    let cfg = ModelConfig {
        dropout: 0.0,
        fusion: Fusion::None,
        ..small_model(vocab.len(), OVERFIT_D_MODEL)
    };
    let samples = build_samples(&data.records, &Default::default(), &vocab, cfg.max_len, &FeatureConfig::default()).unwrap();
    let mut model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let tc = TrainConfig {
        ft_epochs: OVERFIT_MAX_EPOCHS,
        ft_lr: 3e-3,
        dropout: 0.0,
        weight_decay: 0.0,
        patience: None,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut first_hit = None;
    let report = finetune_observed(&samples, &samples, &mut model, &tc, |log, m| {
        if first_hit.is_none() && micro_f1(m, &samples) >= OVERFIT_MIN_F1 {
            first_hit = Some(log.epoch);
        }
    })
    .unwrap();
    let f1 = micro_f1(&model, &samples);
    let secs = t.elapsed().as_secs_f64();
    let hit = first_hit.map_or_else(|| "never".to_string(), |e| format!("at epoch {e}"));
    outcome(
        f1 >= OVERFIT_MIN_F1 && first_hit.is_some() && report.train_loss.len() <= OVERFIT_MAX_EPOCHS && secs < OVERFIT_BUDGET_SECS,
        format!("train micro-F1 {f1:.4} after {} epochs, first >= {OVERFIT_MIN_F1} {hit}, {secs:.1}s", report.train_loss.len()),
    )
}

/// Per-seed test micro-F1 of each variant plus the fitted rule baseline,
/// trained once and shared by the experiment criteria.
#[derive(Default)]
struct Shared {
    runs: Option<Runs>,
}

struct Runs {
    /// Indexed like `Variant::ALL`, then by seed.
    f1: Vec<Vec<f64>>,
    rule_f1: Vec<f64>,
    /// Pretraining plus data preparation and the text-only and full runs.
    multimodal_secs: f64,
}

fn variant_index(v: Variant) -> usize {
    Variant::ALL.iter().position(|&x| x == v).unwrap()
}

const PRETRAIN_TEXTS: usize = 20_000;
const PRETRAIN_SEED: u64 = 9999;

impl Shared {
    /// Masked-LM pretraining of one encoder on a large text-only corpus,
    /// then T, -LSTM, -Cross-Attention and M fine-tuned from it per seed.
    fn runs(&mut self) -> &Runs {
        if self.runs.is_none() {
            let t = Instant::now();
            let corpus = generate(&narrative_spec(PRETRAIN_TEXTS, PRETRAIN_SEED, 0.0)).unwrap();
            let texts: Vec<&str> = corpus.records.iter().map(|r| r.text.as_str()).collect();
            let vocab = Vocab::build(&texts, 2).unwrap();
            let base = small_model(vocab.len(), 16);
            let mut encoder = Model::new(base.clone(), &mut ChaCha8Rng::seed_from_u64(PRETRAIN_SEED)).unwrap();
            let seqs: Vec<TokenSequence> = texts.iter().map(|t| tokenize(t, &vocab, EXP_MAX_LEN)).collect();
            let pre_cfg = TrainConfig {
                pre_epochs: 5,
                pre_lr: 3e-3,
                dropout: 0.1,
                seed: PRETRAIN_SEED,
                ..TrainConfig::default()
            };
            pretrain(&seqs, &mut encoder, &pre_cfg).unwrap();
            let ckpt: Checkpoint = encoder.to_checkpoint();
            let mut multimodal_secs = t.elapsed().as_secs_f64();
            println!("  pretrained encoder on {PRETRAIN_TEXTS} texts in {multimodal_secs:.1}s");

            let ft = TrainConfig {
                ft_epochs: 40,
                ft_lr: 3e-3,
                patience: Some(5),
                dropout: 0.1,
                weight_decay: 0.01,
                ..TrainConfig::default()
            };
            let mut f1 = vec![Vec::new(); Variant::ALL.len()];
            let mut rule_f1 = Vec::new();
            for seed in SEEDS {
                let ts = Instant::now();
                let data = generate(&narrative_spec(EXP_RECORDS, seed, 1.0)).unwrap();
                let (tr, va, te) = split(&data.records, (0.7, 0.2, 0.1), seed).unwrap();
                let prep = |rs: &[DreamRecord]| build_samples(rs, &data.eeg, &vocab, EXP_MAX_LEN, &FeatureConfig::default()).unwrap();
                let (trs, vas, tes) = (prep(&tr), prep(&va), prep(&te));
                let exp = Experiment {
                    train: &trs,
                    val: &vas,
                    test: &tes,
                    model: &base,
                    train_cfg: &ft,
                    pretrained: Some(&ckpt),
                    tau: 0.5,
                };
                multimodal_secs += ts.elapsed().as_secs_f64();
                let mut line = format!("  seed {seed}:");
                for v in Variant::ALL {
                    let tv = Instant::now();
                    let r = exp.run(v, seed).unwrap();
                    if matches!(v, Variant::TextOnly | Variant::Full) {
                        multimodal_secs += tv.elapsed().as_secs_f64();
                    }
                    line += &format!(" {} {:.4}", v.name(), r.test.f1);
                    f1[variant_index(v)].push(r.test.f1);
                }
                let rb = RuleBaseline::fit(&tr);
                let probs: Vec<Vec<f64>> = te.iter().map(|r| rb.predict(&r.text).joint()).collect();
                let gold: Vec<Vec<f64>> = te.iter().map(DreamRecord::joint_labels).collect();
                let rule = dreamnet::evaluation::multilabel_metrics(&probs, &gold, 0.5).unwrap().f1;
                line += &format!(" rule {rule:.4}");
                rule_f1.push(rule);
                println!("{line}");
            }
            self.runs = Some(Runs { f1, rule_f1, multimodal_secs });
        }
        self.runs.as_ref().unwrap()
    }
}

fn multimodal_gain(shared: &mut Shared) -> Outcome {
    let r = shared.runs();
    let t = &r.f1[variant_index(Variant::TextOnly)];
    let m = &r.f1[variant_index(Variant::Full)];
    let gains: Vec<f64> = m.iter().zip(t).map(|(m, t)| m - t).collect();
    let wins = gains.iter().filter(|&&g| g >= MULTIMODAL_MIN_GAIN).count();
    let gains_s: Vec<String> = gains.iter().map(|g| format!("{:+.1}", 100.0 * g)).collect();
    outcome(
        wins >= MULTIMODAL_MIN_SEEDS && r.multimodal_secs < MULTIMODAL_BUDGET_SECS,
        format!(
            "gain >= {:.0} points in {wins}/{} seeds [{}], {:.0}s",
            100.0 * MULTIMODAL_MIN_GAIN,
            SEEDS.len(),
            gains_s.join(" "),
            r.multimodal_secs
        ),
    )
}

fn ablation_ordering(shared: &mut Shared) -> Outcome {
    let r = shared.runs();
    let m = &r.f1[variant_index(Variant::Full)];
    let mut parts = Vec::new();
    let mut pass = true;
    for v in [Variant::TextOnly, Variant::NoLstm, Variant::NoCrossAttention] {
        let other = &r.f1[variant_index(v)];
        let wins = m.iter().zip(other).filter(|(m, o)| m >= o).count();
        pass &= wins >= ABLATION_MIN_SEEDS;
        parts.push(format!("M >= {} in {wins}/{}", v.name(), SEEDS.len()));
    }
    outcome(pass, parts.join(", "))
}

fn correlation_recovery(_: &mut Shared) -> Outcome {
    let data = generate(&GeneratorSpec {
        n: CORR_N,
        seed: 21,
        eeg_fraction: 0.0,
        ..GeneratorSpec::default()
    })
    .unwrap();
    let k = theme_index("falling").unwrap();
    let j = emotion_index("anxiety").unwrap();
    let x: Vec<f64> = data.records.iter().map(|r| f64::from(r.themes[k])).collect();
    let y: Vec<f64> = data.records.iter().map(|r| f64::from(r.emotions[j])).collect();
    let (r, p) = pearson_permutation(&x, &y, MIN_PERMUTATIONS, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    outcome(
        (r - CORR_TARGET).abs() <= CORR_TOL && p < CORR_MAX_P,
        format!("falling/anxiety r = {r:.4}, p = {p:.2e} at n = {CORR_N}"),
    )
}

fn pair_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let (mut pos, mut neg) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            neg += 1.0;
            continue;
        }
        pos += 1.0;
        for (j, &sj) in scores.iter().enumerate() {
            if !labels[j] {
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / (pos * neg)
}

fn auc_oracle(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    let mut sizes = Vec::new();
    for case in 0..AUC_CASES {
        let n = if case == 0 { AUC_MAX_N } else { rng.random_range(2..=AUC_MAX_N) };
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        // coarse grids in some cases force many ties
        let grid = [0u32, 4, 20, 1000][case % 4];
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                if grid == 0 {
                    u
                } else {
                    (u * f64::from(grid)).floor() / f64::from(grid)
                }
            })
            .collect();
        if auc(&scores, &labels).unwrap() != pair_auc(&scores, &labels) {
            mismatches += 1;
        }
        sizes.push(n);
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} mismatches over {AUC_CASES} cases, n up to {}", sizes.iter().max().unwrap()),
    )
}

fn sine(freq: f64, secs: f64) -> Vec<f64> {
    (0..(secs * FS) as usize).map(|i| (2.0 * PI * freq * i as f64 / FS).sin()).collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn dsp(_: &mut Shared) -> Outcome {
    let lo = BANDS[0].1;
    let hi = BANDS[2].2;
    let keep = sine(6.0, 8.0);
    let kept = rms(&bandpass(&keep, lo, hi, FS).unwrap()) / rms(&keep);
    let stop = sine(20.0, 8.0);
    let leaked = rms(&bandpass(&stop, lo, hi, FS).unwrap()) / rms(&stop);
    let psd = welch_psd(&sine(10.0, 8.0), FS, 512, 0.5).unwrap();
    let peak = psd.freq(psd.argmax());
    let alpha = band_power(&psd, (BANDS[2].1, BANDS[2].2)).unwrap() / psd.total();
    outcome(
        (kept - 1.0).abs() <= PASS_GAIN_TOL && leaked < STOP_MAX_RMS && peak == 10.0 && alpha >= ALPHA_MIN_SHARE,
        format!("6 Hz gain {kept:.4}, 20 Hz residual {leaked:.2e}, PSD peak {peak} Hz, alpha share {alpha:.4}"),
    )
}

fn split_exactness(_: &mut Shared) -> Outcome {
    let data = generate(&GeneratorSpec {
        n: SPLIT_N,
        seed: 4,
        eeg_fraction: 0.0,
        ..GeneratorSpec::default()
    })
    .unwrap();
    let ids = |rs: &[DreamRecord]| rs.iter().map(|r| r.id.clone()).collect::<Vec<_>>();
    let (a, b, c) = split(&data.records, (0.70, 0.20, 0.10), 4).unwrap();
    let (a2, b2, c2) = split(&data.records, (0.70, 0.20, 0.10), 4).unwrap();
    let (a3, _, _) = split(&data.records, (0.70, 0.20, 0.10), 5).unwrap();
    let counts = (a.len(), b.len(), c.len());
    let same = ids(&a) == ids(&a2) && ids(&b) == ids(&b2) && ids(&c) == ids(&c2);
    let all: BTreeSet<String> = ids(&a).into_iter().chain(ids(&b)).chain(ids(&c)).collect();
    let differs = ids(&a) != ids(&a3);
    outcome(
        counts == SPLIT_COUNTS && same && all.len() == SPLIT_N && differs,
        format!("counts {counts:?}, deterministic {same}, partition {}, seed-sensitive {differs}", all.len() == SPLIT_N),
    )
}

fn masking_rate(_: &mut Shared) -> Outcome {
    let data = generate(&narrative_spec(2000, 8, 0.0)).unwrap();
    let texts: Vec<&str> = data.records.iter().map(|r| r.text.as_str()).collect();
    let vocab = Vocab::build(&texts, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut eligible, mut masked) = (0usize, 0usize);
    for t in texts {
        if eligible >= MASK_POSITIONS {
            break;
        }
        let seq = tokenize(t, &vocab, 64);
        let (m, targets) = mask_tokens(&seq, MASK_RATE, &mut rng).unwrap();
        eligible += seq.active_ids().iter().filter(|&&id| id >= dreamnet::text::RESERVED.len()).count();
        masked += m.ids.iter().filter(|&&id| id == MASK).count();
        assert_eq!(targets.len(), m.ids.iter().filter(|&&id| id == MASK).count());
    }
    let rate = masked as f64 / eligible as f64;
    outcome(
        eligible >= MASK_POSITIONS && (MASK_RANGE.0..=MASK_RANGE.1).contains(&rate),
        format!("{masked}/{eligible} eligible positions masked ({rate:.4})"),
    )
}

fn rule_baseline(shared: &mut Shared) -> Outcome {
    let r = shared.runs();
    let t = &r.f1[variant_index(Variant::TextOnly)];
    let wins = r.rule_f1.iter().zip(t).filter(|(rule, t)| rule < t).count();
    let pairs: Vec<String> = r.rule_f1.iter().zip(t).map(|(a, b)| format!("{a:.3}<{b:.3}")).collect();
    outcome(
        wins >= RULE_MIN_SEEDS,
        format!("rule below DNet-T in {wins}/{} seeds [{}]", SEEDS.len(), pairs.join(" ")),
    )
}
