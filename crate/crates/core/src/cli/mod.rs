//! Command-line entry points: synthesize data, pretrain, SCST-finetune,
//! generate, evaluate, and run the gradient-check suite.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data/IO error,
//! 3 verification failure.

pub mod config;
pub mod data;

use std::fmt;
use std::fs;
use std::path::Path;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::corpus::{
    generate_synthetic_dataset, save_corpus, save_features, save_split, split_dataset, tokenize,
    FeatureSet, Report, SyntheticTaskConfig, Vocabulary,
};
use crate::decoding::{replay_logprobs, DecodeConfig, DecodeMode, ModelScorer};
use crate::metrics::{cider, evaluate, EvalPair, MetricReport};
use crate::model::{init_model, ModelConfig, ModelParams};
use crate::training::{
    reward_idf, train_scst_epoch, train_xent_epoch, AdamState, PlateauState, RewardKind,
    ScheduleConfig, ScheduleKind, ScstConfig, ScstRow, TrainConfig, XentRow,
};
use crate::verify::{run_gradcheck, GRADCHECK_TOLERANCE};

use config::{flag, key, optional, required, KeySpec, RunConfig};
use data::{load_data, parallel_map, LoadedData};

#[derive(Clone, Debug, PartialEq)]
pub enum CliError {
    Usage(String),
    Data(String),
    Verify(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{}", msg),
            CliError::Data(msg) => write!(f, "{}", msg),
            CliError::Verify(msg) => write!(f, "{}", msg),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Verify(_) => 3,
        }
    }
}

const USAGE: &str = "\
usage: remrg <command> [--key value ...]

commands:
  synth      generate a synthetic features+reports dataset
             --out DIR [--seed S --images K --grid G --finding-types F
              --max-findings M --feature-dim D --noise-sigma S --min-count C]
  train      cross-entropy pretraining
             --data DIR --out DIR [--seed S --d-model D --stack-levels M
              --max-len L --epochs E --batch-size B --base-lr LR
              --warmup-steps W --grad-clip C --schedule noam|constant
              --ckpt FILE]
  finetune   SCST reinforcement fine-tuning with a CIDEr reward
             --data DIR --ckpt FILE --out DIR [--seed S --epochs E
              --batch-size B --base-lr LR --schedule cosine|plateau
              --period-epochs T --min-lr LR --plateau-factor F
              --plateau-patience P --alpha A]
  generate   decode one feature file into report text
             --ckpt FILE --features PATH --vocab PATH [--mode greedy|beam|sample
              --beam K --alpha A --max-len L --seed S --dump-logprobs PATH]
  evaluate   decode a split and score it with every metric
             --ckpt FILE --data DIR --out DIR [--split train|val|test
              --mode greedy|beam|sample --beam K --alpha A --seed S --threads N]
  gradcheck  finite-difference verification of every gradient path
             [--seed S]

Any command accepts --config FILE with flat `key = value` lines; flags
override the file. REMRG_SEED supplies the default seed.
";

/// Entry point; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

fn dispatch(args: &[String]) -> Result<(), CliError> {
    let command = args.first().map(|s| s.as_str()).unwrap_or("help");
    let rest = &args[1.min(args.len())..];
    match command {
        "synth" => cmd_synth(rest),
        "train" => cmd_train(rest),
        "finetune" => cmd_finetune(rest),
        "generate" => cmd_generate(rest),
        "evaluate" => cmd_evaluate(rest),
        "gradcheck" => cmd_gradcheck(rest),
        "help" | "--help" | "-h" => {
            print!("{}", USAGE);
            Ok(())
        }
        other => Err(CliError::Usage(format!(
            "unknown command {:?}\n{}",
            other, USAGE
        ))),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::Data(format!("cannot write {}: {}", path.display(), e)))
}

fn make_out_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {}", out.display(), e)))
}

fn data_err(e: impl fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

// ── synth ───────────────────────────────────────────────────────────────

const SYNTH_KEYS: &[KeySpec] = &[
    required("out"),
    key("seed", "0"),
    key("images", "200"),
    key("grid", "4"),
    key("finding_types", "6"),
    key("max_findings", "4"),
    key("feature_dim", "32"),
    key("noise_sigma", "0.05"),
    key("min_count", "5"),
];

fn cmd_synth(args: &[String]) -> Result<(), CliError> {
    let cfg = RunConfig::resolve("synth", args, SYNTH_KEYS)?;
    let images = cfg.usize_value("images")?;
    if images < 10 {
        return Err(CliError::Usage(format!(
            "--images {} is below the minimum of 10 (the 7:1:2 split needs every part nonempty)",
            images
        )));
    }
    let task = SyntheticTaskConfig {
        grid: cfg.usize_value("grid")?,
        finding_types: cfg.usize_value("finding_types")?,
        max_findings: cfg.usize_value("max_findings")?,
        feature_dim: cfg.usize_value("feature_dim")?,
        noise_sigma: cfg.f64_value("noise_sigma")?,
        images,
        seed: cfg.u64_value("seed")?,
    };
    let examples = generate_synthetic_dataset(&task).map_err(data_err)?;

    let out = cfg.path("out");
    make_out_dir(&out)?;
    let feat_dir = out.join("features");
    make_out_dir(&feat_dir)?;

    let mut records = Vec::with_capacity(examples.len());
    for ex in &examples {
        save_features(
            &feat_dir.join(format!("{}.feat", ex.features.image_id)),
            &ex.features,
        )
        .map_err(data_err)?;
        records.push((ex.features.image_id.clone(), ex.text.clone()));
    }
    save_corpus(&out.join("corpus.tsv"), &records).map_err(data_err)?;

    let token_lists: Vec<Vec<String>> = examples.iter().map(|e| tokenize(&e.text)).collect();
    let refs: Vec<&[String]> = token_lists.iter().map(|l| l.as_slice()).collect();
    let vocab = Vocabulary::build(refs, cfg.usize_value("min_count")?);
    vocab.save(&out.join("vocab.txt")).map_err(data_err)?;

    let ids: Vec<String> = examples.iter().map(|e| e.features.image_id.clone()).collect();
    let splits = split_dataset(&ids, task.seed).map_err(data_err)?;
    save_split(&out.join("split_train.txt"), &splits.train).map_err(data_err)?;
    save_split(&out.join("split_val.txt"), &splits.val).map_err(data_err)?;
    save_split(&out.join("split_test.txt"), &splits.test).map_err(data_err)?;

    write_file(&out.join("run_config.txt"), &cfg.echo())?;
    println!(
        "wrote {} images ({} train / {} val / {} test), vocabulary of {} tokens",
        images,
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        vocab.size()
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

const TRAIN_KEYS: &[KeySpec] = &[
    required("data"),
    required("out"),
    key("seed", "0"),
    key("d_model", "1024"),
    key("stack_levels", "4"),
    key("max_len", "114"),
    key("epochs", "60"),
    key("batch_size", "8"),
    key("base_lr", "0.0001"),
    key("warmup_steps", "10000"),
    key("grad_clip", "5"),
    key("schedule", "noam"),
    optional("ckpt"),
];

fn cmd_train(args: &[String]) -> Result<(), CliError> {
    let cfg = RunConfig::resolve("train", args, TRAIN_KEYS)?;
    let data = load_data(&cfg.path("data"))?;
    if data.train.is_empty() {
        return Err(CliError::Data("train split is empty".into()));
    }

    let resume = cfg.str_value("ckpt");
    let mut model = if resume.is_empty() {
        let mconfig = ModelConfig {
            d_model: cfg.usize_value("d_model")?,
            stack_levels: cfg.usize_value("stack_levels")?,
            vocab_size: data.vocab.size(),
            max_len: cfg.usize_value("max_len")?,
            feature_dim_in: data.feature_dim,
            n_regions: data.n_regions,
        };
        init_model(&mconfig, cfg.u64_value("seed")?).map_err(|e| CliError::Usage(e.to_string()))?
    } else {
        let model = load_checkpoint(&cfg.path("ckpt")).map_err(data_err)?;
        check_resume_conflicts(&cfg, &model.config)?;
        check_model_matches_data(&model.config, &data)?;
        model
    };

    let schedule = ScheduleConfig {
        kind: match cfg.str_value("schedule") {
            "noam" => ScheduleKind::Noam,
            "constant" => ScheduleKind::Constant,
            other => {
                return Err(CliError::Usage(format!(
                    "--schedule must be noam or constant, found {:?}",
                    other
                )))
            }
        },
        base_lr: cfg.f64_value("base_lr")?,
        warmup_steps: cfg.usize_value("warmup_steps")?,
        ..ScheduleConfig::pretrain_default()
    };
    let train_cfg = TrainConfig {
        epochs: cfg.usize_value("epochs")?,
        batch_size: cfg.usize_value("batch_size")?,
        seed: cfg.u64_value("seed")?,
        grad_clip: cfg.f64_value("grad_clip")?,
        reward: RewardKind::Cider,
    };

    let out = cfg.path("out");
    make_out_dir(&out)?;
    let mut adam = AdamState::new(&model);
    let mut global_step = 0usize;
    let mut rows: Vec<XentRow> = Vec::new();
    for epoch in 0..train_cfg.epochs {
        let (loss, mut epoch_rows) = train_xent_epoch(
            &mut model,
            &data.train,
            &train_cfg,
            &schedule,
            &mut adam,
            epoch,
            &mut global_step,
        )
        .map_err(data_err)?;
        rows.append(&mut epoch_rows);
        println!("epoch {}/{} loss {}", epoch + 1, train_cfg.epochs, loss);
    }

    let mut csv = String::from("epoch,step,lr,loss\n");
    for row in &rows {
        csv.push_str(&row.csv());
        csv.push('\n');
    }
    write_file(&out.join("pretrain_curve.csv"), &csv)?;
    save_checkpoint(&out.join("model.ckpt"), &model).map_err(data_err)?;
    write_file(&out.join("run_config.txt"), &cfg.echo())?;
    Ok(())
}

fn check_resume_conflicts(cfg: &RunConfig, mconfig: &ModelConfig) -> Result<(), CliError> {
    let checks: [(&str, usize); 3] = [
        ("d_model", mconfig.d_model),
        ("stack_levels", mconfig.stack_levels),
        ("max_len", mconfig.max_len),
    ];
    for (name, ckpt_value) in checks {
        if cfg.was_set(name) && cfg.usize_value(name)? != ckpt_value {
            return Err(CliError::Usage(format!(
                "--{} {} conflicts with the checkpoint's {} = {}",
                name,
                cfg.usize_value(name)?,
                name,
                ckpt_value
            )));
        }
    }
    Ok(())
}

fn check_model_matches_data(mconfig: &ModelConfig, data: &LoadedData) -> Result<(), CliError> {
    if mconfig.vocab_size != data.vocab.size() {
        return Err(CliError::Data(format!(
            "checkpoint vocabulary size {} does not match the dataset's {}",
            mconfig.vocab_size,
            data.vocab.size()
        )));
    }
    if mconfig.feature_dim_in != data.feature_dim {
        return Err(CliError::Data(format!(
            "checkpoint feature dim {} does not match the dataset's {}",
            mconfig.feature_dim_in, data.feature_dim
        )));
    }
    Ok(())
}

// ── finetune ────────────────────────────────────────────────────────────

const FINETUNE_KEYS: &[KeySpec] = &[
    required("data"),
    required("ckpt"),
    required("out"),
    key("seed", "0"),
    key("epochs", "60"),
    key("batch_size", "2"),
    key("base_lr", "0.00001"),
    key("schedule", "cosine"),
    key("period_epochs", "15"),
    key("min_lr", "0.00000004"),
    key("plateau_factor", "0.8"),
    key("plateau_patience", "3"),
    key("alpha", "2"),
    key("grad_clip", "5"),
];

fn cmd_finetune(args: &[String]) -> Result<(), CliError> {
    let cfg = RunConfig::resolve("finetune", args, FINETUNE_KEYS)?;
    let data = load_data(&cfg.path("data"))?;
    let mut model = load_checkpoint(&cfg.path("ckpt")).map_err(data_err)?;
    check_model_matches_data(&model.config, &data)?;
    if data.train.is_empty() {
        return Err(CliError::Data("train split is empty".into()));
    }

    let schedule = ScheduleConfig {
        kind: match cfg.str_value("schedule") {
            "cosine" => ScheduleKind::Cosine,
            "plateau" => ScheduleKind::Plateau,
            other => {
                return Err(CliError::Usage(format!(
                    "--schedule must be cosine or plateau, found {:?}",
                    other
                )))
            }
        },
        base_lr: cfg.f64_value("base_lr")?,
        period_epochs: cfg.usize_value("period_epochs")?,
        min_lr: cfg.f64_value("min_lr")?,
        plateau_factor: cfg.f64_value("plateau_factor")?,
        plateau_patience: cfg.usize_value("plateau_patience")?,
        ..ScheduleConfig::rl_default()
    };
    let train_cfg = TrainConfig {
        epochs: cfg.usize_value("epochs")?,
        batch_size: cfg.usize_value("batch_size")?,
        seed: cfg.u64_value("seed")?,
        grad_clip: cfg.f64_value("grad_clip")?,
        reward: RewardKind::Cider,
    };
    let scst_cfg = ScstConfig {
        alpha: cfg.f64_value("alpha")?,
        max_len: model.config.max_len,
    };

    let out = cfg.path("out");
    make_out_dir(&out)?;
    let idf = reward_idf(&data.train);
    let mut adam = AdamState::new(&model);
    let mut plateau = PlateauState::new();
    let mut lr = schedule.base_lr;
    let mut rows: Vec<ScstRow> = Vec::new();

    for epoch in 0..train_cfg.epochs {
        if matches!(schedule.kind, ScheduleKind::Cosine) {
            lr = crate::training::cosine_annealing_lr(epoch, &schedule);
        }
        let row = train_scst_epoch(
            &mut model,
            &data.train,
            &train_cfg,
            &scst_cfg,
            &idf,
            &data.vocab,
            &mut adam,
            epoch,
            lr,
        )
        .map_err(data_err)?;
        println!(
            "epoch {}/{} lr {} r_greedy {} r_sample {}",
            epoch + 1,
            train_cfg.epochs,
            row.lr,
            row.r_greedy,
            row.r_sample
        );
        rows.push(row);

        if matches!(schedule.kind, ScheduleKind::Plateau) && !data.val.is_empty() {
            let monitored = validation_cider(&model, &data, &scst_cfg)?;
            if plateau.observe(monitored, schedule.plateau_patience) {
                lr = (lr * schedule.plateau_factor).max(schedule.min_lr);
            }
        }
    }

    let mut csv = String::from("epoch,lr,r_greedy,r_sample\n");
    for row in &rows {
        csv.push_str(&row.csv());
        csv.push('\n');
    }
    write_file(&out.join("rl_curve.csv"), &csv)?;
    save_checkpoint(&out.join("model.ckpt"), &model).map_err(data_err)?;
    write_file(&out.join("run_config.txt"), &cfg.echo())?;
    Ok(())
}

/// Corpus CIDEr of greedy+penalty decodes over the validation split, the
/// monitored metric of the plateau arm.
fn validation_cider(
    model: &ModelParams,
    data: &LoadedData,
    scst_cfg: &ScstConfig,
) -> Result<f64, CliError> {
    let decode_cfg = DecodeConfig {
        mode: DecodeMode::Greedy,
        beam_size: 1,
        max_len: model.config.max_len,
        alpha: scst_cfg.alpha,
        seed: 0,
    };
    let pairs = decode_pairs(model, &data.val, &data.vocab, &decode_cfg, 1)?;
    cider(&pairs).map_err(data_err)
}

// ── generate ────────────────────────────────────────────────────────────

const GENERATE_KEYS: &[KeySpec] = &[
    required("ckpt"),
    required("features"),
    required("vocab"),
    key("mode", "beam"),
    key("beam", "2"),
    key("alpha", "2"),
    key("max_len", "0"),
    key("seed", "0"),
    optional("dump_logprobs"),
];

fn parse_mode(s: &str) -> Result<DecodeMode, CliError> {
    match s {
        "greedy" => Ok(DecodeMode::Greedy),
        "beam" => Ok(DecodeMode::Beam),
        "sample" => Ok(DecodeMode::Sample),
        other => Err(CliError::Usage(format!(
            "--mode must be greedy, beam, or sample, found {:?}",
            other
        ))),
    }
}

fn cmd_generate(args: &[String]) -> Result<(), CliError> {
    let cfg = RunConfig::resolve("generate", args, GENERATE_KEYS)?;
    let model = load_checkpoint(&cfg.path("ckpt")).map_err(data_err)?;
    let vocab = Vocabulary::load(&cfg.path("vocab")).map_err(data_err)?;
    if vocab.size() != model.config.vocab_size {
        return Err(CliError::Data(format!(
            "vocabulary size {} does not match the checkpoint's {}",
            vocab.size(),
            model.config.vocab_size
        )));
    }
    let features = crate::corpus::load_features(&cfg.path("features")).map_err(data_err)?;

    let max_len = cfg.usize_value("max_len")?;
    let decode_cfg = DecodeConfig {
        mode: parse_mode(cfg.str_value("mode"))?,
        beam_size: cfg.usize_value("beam")?,
        max_len: if max_len == 0 {
            model.config.max_len
        } else {
            max_len
        },
        alpha: cfg.f64_value("alpha")?,
        seed: cfg.u64_value("seed")?,
    };
    let ids = crate::decoding::generate(&model, &features, &decode_cfg).map_err(data_err)?;
    println!("{}", vocab.detokenize(&ids).map_err(data_err)?);

    let dump = cfg.str_value("dump_logprobs");
    if !dump.is_empty() {
        // sampling never applies the penalty; greedy and beam scoring does
        let alpha = match decode_cfg.mode {
            DecodeMode::Sample => 0.0,
            _ => decode_cfg.alpha,
        };
        let scorer = ModelScorer::new(&model, &features).map_err(data_err)?;
        let steps = replay_logprobs(&scorer, &ids, alpha)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let mut out = String::from("step\ttoken_id\ttoken\tlogprob\n");
        for (i, (&tok, lp)) in ids.iter().zip(steps.iter()).enumerate() {
            let word = vocab.decode(&[tok]).map_err(data_err)?.remove(0);
            out.push_str(&format!("{}\t{}\t{}\t{}\n", i, tok, word, lp));
        }
        write_file(&cfg.path("dump_logprobs"), &out)?;
    }
    Ok(())
}

// ── evaluate ────────────────────────────────────────────────────────────

const EVALUATE_KEYS: &[KeySpec] = &[
    required("ckpt"),
    required("data"),
    required("out"),
    key("split", "test"),
    key("mode", "beam"),
    key("beam", "2"),
    key("alpha", "2"),
    key("seed", "0"),
    key("threads", "1"),
];

fn decode_pairs(
    model: &ModelParams,
    items: &[(FeatureSet, Report)],
    vocab: &Vocabulary,
    decode_cfg: &DecodeConfig,
    threads: usize,
) -> Result<Vec<EvalPair>, CliError> {
    let decoded: Vec<Result<Vec<usize>, String>> = parallel_map(items, threads, |(features, _)| {
        crate::decoding::generate(model, features, decode_cfg).map_err(|e| e.to_string())
    });
    let mut pairs = Vec::with_capacity(items.len());
    for ((_, report), ids) in items.iter().zip(decoded) {
        let ids = ids.map_err(CliError::Data)?;
        pairs.push(EvalPair::new(
            &report.image_id,
            crate::training::decoded_tokens(&ids, vocab),
            vec![report.reference_tokens()],
        ));
    }
    Ok(pairs)
}

fn cmd_evaluate(args: &[String]) -> Result<(), CliError> {
    let cfg = RunConfig::resolve("evaluate", args, EVALUATE_KEYS)?;
    let model = load_checkpoint(&cfg.path("ckpt")).map_err(data_err)?;
    let data = load_data(&cfg.path("data"))?;
    check_model_matches_data(&model.config, &data)?;

    let items = match cfg.str_value("split") {
        "train" => &data.train,
        "val" => &data.val,
        "test" => &data.test,
        other => {
            return Err(CliError::Usage(format!(
                "--split must be train, val, or test, found {:?}",
                other
            )))
        }
    };
    if items.is_empty() {
        return Err(CliError::Data(format!(
            "split {:?} is empty",
            cfg.str_value("split")
        )));
    }

    let decode_cfg = DecodeConfig {
        mode: parse_mode(cfg.str_value("mode"))?,
        beam_size: cfg.usize_value("beam")?,
        max_len: model.config.max_len,
        alpha: cfg.f64_value("alpha")?,
        seed: cfg.u64_value("seed")?,
    };
    let threads = cfg.usize_value("threads")?;
    let pairs = decode_pairs(&model, items, &data.vocab, &decode_cfg, threads)?;

    let out = cfg.path("out");
    make_out_dir(&out)?;
    let mut hyp = String::new();
    for pair in &pairs {
        hyp.push_str(&format!("{}\t{}\n", pair.image_id, pair.candidate.join(" ")));
    }
    write_file(&out.join("hypotheses.txt"), &hyp)?;

    let report: MetricReport = evaluate(&pairs).map_err(data_err)?;
    write_file(
        &out.join("metrics.csv"),
        &format!("{}\n{}\n", MetricReport::csv_header(), report.csv_row()),
    )?;
    write_file(&out.join("metrics.txt"), &report.kv_block())?;
    write_file(&out.join("run_config.txt"), &cfg.echo())?;
    print!("{}", report.kv_block());
    Ok(())
}

// ── gradcheck ───────────────────────────────────────────────────────────

const GRADCHECK_KEYS: &[KeySpec] = &[key("seed", "0"), flag("corrupt")];

fn cmd_gradcheck(args: &[String]) -> Result<(), CliError> {
    let cfg = RunConfig::resolve("gradcheck", args, GRADCHECK_KEYS)?;
    let reports = run_gradcheck(cfg.u64_value("seed")?, cfg.bool_value("corrupt")?);
    let mut failures = 0usize;
    for r in &reports {
        println!(
            "{:<24} max_rel_err {:>12.3e}  {}",
            r.component,
            r.max_rel_err,
            if r.pass() { "PASS" } else { "FAIL" }
        );
        if !r.pass() {
            failures += 1;
        }
    }
    println!("tolerance {:.0e}", GRADCHECK_TOLERANCE);
    if failures > 0 {
        return Err(CliError::Verify(format!(
            "{} of {} gradient components exceeded the tolerance",
            failures,
            reports.len()
        )));
    }
    Ok(())
}
