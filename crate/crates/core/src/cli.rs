//! Command-line surface.
//!
//! Commands: train, eval, count, bench-scan, gen-data, overlay, gradcheck.
//! Exit codes are a stable contract: 0 ok, 2 config error, 3 data error,
//! 4 numeric error. Every command prints its effective configuration
//! header before doing work.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use crate::arch::{ModelConfig, Network, Variant};
use crate::bench;
use crate::check_net;
use crate::data::{gen_data, Dataset};
use crate::error::{Error, Result};
use crate::io::{count_flops, Checkpoint};
use crate::metrics::{connected_components, instance_f1, DEFAULT_NSD_TOLERANCE};
use crate::tensor::{no_grad, ops, DType, Storage};
use crate::train::{evaluate, train_loop, TrainConfig};
use crate::viz;

const USAGE: &str = "\
usage: swin-umamba <command> [options]

commands:
  gen-data    --out DIR [--classes K] [--channels C] [--count N] [--test-count M] [--size S] [--seed N]
  train       --config FILE --data DIR [--out DIR] [--pretrained CKPT] [--variant umamba|dagger]
              [--epochs N] [--iters-per-epoch N] [--batch-size N] [--lr F] [--weight-decay F]
              [--freeze-epochs N] [--seed N]
  eval        --ckpt FILE --data DIR [--split train|test] [--tol F] [--instances]
  count       --config FILE [--input-size HxW] [--json]
  bench-scan  [--lengths CSV] [--d N] [--n-state N] [--reps N] [--attention] [--attn-lengths CSV] [--seed N]
  overlay     --ckpt FILE --image FILE --out FILE
  gradcheck   [--quick]
  make-surrogate --config FILE --out FILE [--seed N]
";

struct Args {
    flags: HashMap<String, String>,
    switches: HashSet<String>,
}

impl Args {
    fn parse(raw: &[String]) -> Result<Args> {
        let mut flags = HashMap::new();
        let mut switches = HashSet::new();
        let mut i = 0;
        while i < raw.len() {
            let key = &raw[i];
            if !key.starts_with("--") {
                return Err(Error::Config(format!("unexpected argument '{key}'\n{USAGE}")));
            }
            let name = key.trim_start_matches("--").to_string();
            if i + 1 < raw.len() && !raw[i + 1].starts_with("--") {
                flags.insert(name, raw[i + 1].clone());
                i += 2;
            } else {
                switches.insert(name);
                i += 1;
            }
        }
        Ok(Args { flags, switches })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.flags.get(key).map(|s| s.as_str())
    }

    fn required(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Config(format!("missing required option --{key}")))
    }

    fn parse_num<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Config(format!("--{key}: cannot parse '{v}'"))),
        }
    }

    fn has(&self, key: &str) -> bool {
        self.switches.contains(key)
    }
}

pub fn run(raw: &[String]) -> Result<()> {
    let Some(cmd) = raw.first() else {
        return Err(Error::Config(USAGE.into()));
    };
    let args = Args::parse(&raw[1..])?;
    match cmd.as_str() {
        "gen-data" => cmd_gen_data(&args),
        "train" => cmd_train(&args),
        "eval" => cmd_eval(&args),
        "count" => cmd_count(&args),
        "bench-scan" => cmd_bench_scan(&args),
        "overlay" => cmd_overlay(&args),
        "gradcheck" => cmd_gradcheck(&args),
        "make-surrogate" => cmd_make_surrogate(&args),
        other => Err(Error::Config(format!("unknown command '{other}'\n{USAGE}"))),
    }
}

fn cmd_make_surrogate(args: &Args) -> Result<()> {
    let cfg = load_config(args.required("config")?)?;
    let out = PathBuf::from(args.required("out")?);
    let seed: u64 = args.parse_num("seed", 0u64)?;
    println!("# make-surrogate variant={} out={} seed={seed}", cfg.variant.name(), out.display());
    let ckpt = Checkpoint::make_surrogate_pretrained(&cfg, seed)?;
    ckpt.write(&out)?;
    println!("wrote surrogate checkpoint with {} designated tensors", ckpt.tensors.len());
    Ok(())
}

fn cmd_gen_data(args: &Args) -> Result<()> {
    let out = PathBuf::from(args.required("out")?);
    let classes: usize = args.parse_num("classes", 3)?;
    let channels: usize = args.parse_num("channels", 1)?;
    let count: usize = args.parse_num("count", 16)?;
    let test_count: usize = args.parse_num("test-count", (count / 5).max(1).min(count.saturating_sub(1)))?;
    let size: usize = args.parse_num("size", 64)?;
    let seed: u64 = args.parse_num("seed", 1u64)?;
    if test_count >= count {
        return Err(Error::Config(format!("--test-count {test_count} must be < --count {count}")));
    }
    println!("# gen-data out={} classes={classes} channels={channels} count={count} test_count={test_count} size={size} seed={seed}", out.display());
    let manifest = gen_data(classes, channels, count - test_count, test_count, size, seed, &out)?;
    println!("wrote {} samples ({} train / {} test) to {}", manifest.count, manifest.splits.train.len(), manifest.splits.test.len(), out.display());
    Ok(())
}

fn load_config(path: &str) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {path}: {e}")))?;
    ModelConfig::from_json(&text)
}

fn parse_variant(v: &str) -> Result<Variant> {
    match v {
        "umamba" => Ok(Variant::Umamba),
        "dagger" | "umamba_dagger" => Ok(Variant::UmambaDagger),
        other => Err(Error::Config(format!("unknown variant '{other}' (umamba|dagger)"))),
    }
}

fn cmd_train(args: &Args) -> Result<()> {
    let mut model_cfg = load_config(args.required("config")?)?;
    if let Some(v) = args.get("variant") {
        model_cfg.variant = parse_variant(v)?;
    }
    let data_dir = PathBuf::from(args.required("data")?);
    let out_dir = PathBuf::from(args.get("out").unwrap_or("train_out"));
    let tc = TrainConfig {
        epochs: args.parse_num("epochs", 10usize)?,
        iters_per_epoch: args.parse_num("iters-per-epoch", 250usize)?,
        base_lr: args.parse_num("lr", 1e-4f64)?,
        weight_decay: args.parse_num("weight-decay", 0.05f64)?,
        freeze_epochs: args.parse_num("freeze-epochs", 10usize)?,
        ds_weights: None,
        batch_size: args.parse_num("batch-size", 4usize)?,
        seed: args.parse_num("seed", 0u64)?,
    };

    let data = Dataset::open(&data_dir)?;
    if data.manifest.channels != model_cfg.input_channels || data.manifest.num_classes != model_cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset (C={}, K={}) does not match config (C={}, K={})",
            data.manifest.channels, data.manifest.num_classes, model_cfg.input_channels, model_cfg.num_classes
        )));
    }
    model_cfg.input_size = data.manifest.size;
    model_cfg.validate()?;

    println!(
        "# train variant={} data={} out={} epochs={} iters_per_epoch={} batch_size={} lr={} weight_decay={} freeze_epochs={} seed={} pretrained={}",
        model_cfg.variant.name(),
        data_dir.display(),
        out_dir.display(),
        tc.epochs,
        tc.iters_per_epoch,
        tc.batch_size,
        tc.base_lr,
        tc.weight_decay,
        tc.freeze_epochs,
        tc.seed,
        args.get("pretrained").unwrap_or("none"),
    );

    let net = Network::build(&model_cfg, tc.seed, DType::F32)?;
    let mut frozen: HashSet<String> = HashSet::new();
    if let Some(ckpt_path) = args.get("pretrained") {
        let ckpt = Checkpoint::read(Path::new(ckpt_path))?;
        let report = ckpt.selective_init(&net)?;
        println!(
            "selective init: {} tensors initialized, {} skipped (first skipped: {})",
            report.initialized.len(),
            report.skipped.len(),
            report.skipped.first().map(|s| s.as_str()).unwrap_or("-")
        );
        frozen = report.initialized.into_iter().collect();
    }

    std::fs::create_dir_all(&out_dir)?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log_file = std::fs::File::create(&log_path)?;
    use std::io::Write;
    let logs = train_loop(&net, &data, &tc, &frozen, |log| {
        let line = serde_json::to_string(log).expect("log serializes");
        println!("{line}");
        let _ = writeln!(log_file, "{line}");
    })?;

    let ckpt_path = out_dir.join("model.ckpt");
    let mut ckpt = Checkpoint::from_network(&net);
    ckpt.config = model_cfg.clone();
    ckpt.write(&ckpt_path)?;
    println!(
        "trained {} epochs; final loss {:.4} dsc {:.4}; checkpoint {}",
        logs.len(),
        logs.last().map(|l| l.train_loss).unwrap_or(f64::NAN),
        logs.last().map(|l| l.mean_dsc).unwrap_or(f64::NAN),
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_eval(args: &Args) -> Result<()> {
    let ckpt_path = PathBuf::from(args.required("ckpt")?);
    let data_dir = PathBuf::from(args.required("data")?);
    let split = args.get("split").unwrap_or("test").to_string();
    let tol: f64 = args.parse_num("tol", DEFAULT_NSD_TOLERANCE)?;
    let instances = args.has("instances");
    println!("# eval ckpt={} data={} split={split} tol={tol} instances={instances}", ckpt_path.display(), data_dir.display());

    let ckpt = Checkpoint::read(&ckpt_path)?;
    let data = Dataset::open(&data_dir)?;
    let mut cfg = ckpt.config.clone();
    cfg.input_size = data.manifest.size;
    let net = Network::build(&cfg, 0, DType::F32)?;
    ckpt.apply_full(&net)?;

    let report = evaluate(&net, &data, &split, tol)?;
    println!("class      dsc      nsd");
    for (i, (d, n)) in report.per_class_dsc.iter().zip(&report.per_class_nsd).enumerate() {
        println!("{:<8} {d:8.4} {n:8.4}", i + 1);
    }
    println!("mean     {:8.4} {:8.4}", report.mean_dsc, report.mean_nsd);

    if instances {
        let stems = data.stems(&split)?.to_vec();
        let (h, w) = data.manifest.size;
        let mut f1_sum = 0.0;
        for stem in &stems {
            let (x, y) = data.load_batch(&[stem.as_str()])?;
            let heads = no_grad(|| net.forward(&x))?;
            let pred = ops::argmax_channels(&heads[0])?;
            let (pm, gm): (Vec<bool>, Vec<bool>) = {
                let (pd, gd) = (pred.data(), y.data());
                match (&*pd, &*gd) {
                    (Storage::U8(p), Storage::U8(g)) => {
                        (p.iter().map(|&v| v > 0).collect(), g.iter().map(|&v| v > 0).collect())
                    }
                    _ => unreachable!(),
                }
            };
            f1_sum += instance_f1(&connected_components(&pm, h, w), &connected_components(&gm, h, w), 0.5);
        }
        println!("instance_f1 {:.4}", f1_sum / stems.len() as f64);
    }
    Ok(())
}

fn cmd_count(args: &Args) -> Result<()> {
    let cfg = load_config(args.required("config")?)?;
    let input_size = match args.get("input-size") {
        None => cfg.input_size,
        Some(s) => {
            let (h, w) = s
                .split_once('x')
                .ok_or_else(|| Error::Config(format!("--input-size expects HxW, got '{s}'")))?;
            (
                h.parse().map_err(|_| Error::Config(format!("bad height '{h}'")))?,
                w.parse().map_err(|_| Error::Config(format!("bad width '{w}'")))?,
            )
        }
    };
    println!("# count variant={} input_size={}x{}", cfg.variant.name(), input_size.0, input_size.1);
    let report = count_flops(&cfg, input_size)?;
    if args.has("json") {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        return Ok(());
    }
    println!("{}", report.table());
    println!(
        "flops @ {}x{}: {:.2}G ({})",
        input_size.0,
        input_size.1,
        report.flops.unwrap() as f64 / 1e9,
        report.flops.unwrap()
    );
    println!("convention: {}", report.convention);
    Ok(())
}

fn parse_lengths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("bad length '{p}'"))))
        .collect()
}

fn cmd_bench_scan(args: &Args) -> Result<()> {
    let lengths = parse_lengths(args.get("lengths").unwrap_or("4096,8192,16384,32768,65536,131072"))?;
    if lengths.is_empty() || lengths.iter().any(|&l| l == 0) {
        return Err(Error::Config("lengths must be >= 1".into()));
    }
    let d: usize = args.parse_num("d", 4)?;
    let n_state: usize = args.parse_num("n-state", 4)?;
    let reps: usize = args.parse_num("reps", 3)?;
    let seed: u64 = args.parse_num("seed", 0u64)?;
    println!("# bench-scan lengths={lengths:?} d={d} n_state={n_state} reps={reps} seed={seed}");
    let rows = bench::bench_scan(&lengths, d, n_state, reps, seed)?;
    println!("{:>8}  {:>12}  {:>12}  {:>9}  {:>9}", "L", "seq_s", "par_s", "seq_x", "par_x");
    let mut prev: Option<&bench::ScanTiming> = None;
    for row in &rows {
        let (rs, rp) = match prev {
            Some(p) if p.length * 2 == row.length => (
                format!("{:.2}", row.sequential_s / p.sequential_s),
                format!("{:.2}", row.parallel_s / p.parallel_s),
            ),
            _ => ("-".into(), "-".into()),
        };
        println!("{:>8}  {:>12.6}  {:>12.6}  {:>9}  {:>9}", row.length, row.sequential_s, row.parallel_s, rs, rp);
        prev = Some(row);
    }
    if args.has("attention") {
        let attn_lengths = parse_lengths(args.get("attn-lengths").unwrap_or("1024,2048,4096,8192"))?;
        let dm: usize = args.parse_num("attn-dim", 16)?;
        let rows = bench::bench_attention(&attn_lengths, dm, reps, seed);
        println!("{:>8}  {:>12}  {:>9}", "L", "attn_s", "attn_x");
        let mut prev: Option<&bench::AttentionTiming> = None;
        for row in &rows {
            let r = match prev {
                Some(p) if p.length * 2 == row.length => format!("{:.2}", row.seconds / p.seconds),
                _ => "-".into(),
            };
            println!("{:>8}  {:>12.6}  {:>9}", row.length, row.seconds, r);
            prev = Some(row);
        }
    }
    Ok(())
}

fn cmd_overlay(args: &Args) -> Result<()> {
    let ckpt_path = PathBuf::from(args.required("ckpt")?);
    let image_path = PathBuf::from(args.required("image")?);
    let out_path = PathBuf::from(args.required("out")?);
    println!("# overlay ckpt={} image={} out={}", ckpt_path.display(), image_path.display(), out_path.display());

    let ckpt = Checkpoint::read(&ckpt_path)?;
    let image = crate::io::ntf::load(&image_path).map_err(|e| Error::Data(format!("{}: {e}", image_path.display())))?;
    let is_ = image.shape().to_vec();
    if is_.len() != 3 {
        return Err(Error::Data(format!("overlay image must be [C,H,W], got {is_:?}")));
    }
    let (c, h, w) = (is_[0], is_[1], is_[2]);
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Data(format!("image {h}x{w} must be divisible by 32")));
    }
    let mut cfg = ckpt.config.clone();
    cfg.input_size = (h, w);
    if cfg.input_channels != c {
        return Err(Error::Data(format!("image has {c} channels, checkpoint expects {}", cfg.input_channels)));
    }
    let net = Network::build(&cfg, 0, DType::F32)?;
    ckpt.apply_full(&net)?;
    let batched = ops::reshape(&image, &[1, c, h, w])?;
    let heads = no_grad(|| net.forward(&batched))?;
    let pred = ops::argmax_channels(&heads[0])?;
    let labels = ops::reshape(&pred, &[h, w])?;
    let (rgb, ww, hh) = viz::render_overlay(&image, &labels)?;
    viz::write_ppm(&out_path, &rgb, ww, hh)?;
    println!("wrote {} ({}x{})", out_path.display(), ww, hh);
    Ok(())
}

fn cmd_gradcheck(args: &Args) -> Result<()> {
    let quick = args.has("quick");
    println!("# gradcheck quick={quick}");
    let mut failures = 0usize;
    for variant in [Variant::Umamba, Variant::UmambaDagger] {
        let sample = if quick { 6 } else { 24 };
        let reports = check_net::network_gradcheck(variant, sample, 2, 7)?;
        for rep in &reports {
            let ok = rep.max_rel_err < 1e-3;
            println!(
                "[{}] {} {:<52} rel_err {:.3e}",
                if ok { "PASS" } else { "FAIL" },
                variant.name(),
                rep.name,
                rep.max_rel_err
            );
            failures += (!ok) as usize;
        }
    }
    if failures > 0 {
        return Err(Error::Numeric(format!("{failures} gradient checks failed")));
    }
    println!("all gradient checks passed");
    Ok(())
}
