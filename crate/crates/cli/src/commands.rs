//! One function per subcommand.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use rcm_core::chansim::{
    analytic_frequency_correlation, ensemble_stats, generate_channel, inject_contamination, mean_power, rms_distance,
    write_dataset, ChannelGrid, SimConfig, TapSpec,
};
use rcm_core::comprehend::{find_scale, mean_perplexity, scale_channel, transfer_adapt, ScaleSearchConfig, Spacing};
use rcm_core::downstream::{
    attention_domain_profile, chart_points, compress, compression_ratio, detect_contamination_at, fingerprint,
    make_attention_uniform, max_attention_row_error, mitigate_contamination, tsne, uniform_bucket_shares,
    write_attention_profile, write_chart, CompressionDims, Decision, TsneConfig,
};
use rcm_core::nn::{gradcheck_config, gradient_check, write_checkpoint, ExtraTensor, Model, ModelConfig};
use rcm_core::pretrain::{evaluate, write_metrics_line, PretrainConfig, Trainer, METRICS_HEADER};
use rcm_core::tokenizer::{build_vocabulary, quantize, FeatureMap, SequenceExample, TokenGrid, Vocabulary};
use rcm_core::{Complex64, Error};

use crate::cli::*;
use crate::io::{read_features, read_grid, read_grids, read_model, read_vocab, write_file, write_report, CmdResult, Failure};

/// Relative error bound of the finite-difference comparison's denominator.
const GRADCHECK_FLOOR: f64 = 1e-6;

pub fn dispatch(cmd: Command, out: &Path) -> CmdResult {
    match cmd {
        Command::Simulate(a) => simulate(a, out),
        Command::Verify(a) => verify(a, out),
        Command::SimStats(a) => sim_stats(a, out),
        Command::Vocab(a) => vocab(a, out),
        Command::Tokenize(a) => tokenize(a, out),
        Command::Pretrain(a) => pretrain(a, out),
        Command::Eval(a) => eval(a, out),
        Command::FindScale(a) => find_scale_cmd(a, out),
        Command::Transfer(a) => transfer(a, out),
        Command::Detect(a) => detect(a, out),
        Command::Mitigate(a) => mitigate(a, out),
        Command::Compress(a) => compress_cmd(a, out),
        Command::Fingerprint(a) => fingerprint_cmd(a, out),
        Command::Chart(a) => chart(a, out),
        Command::Attention(a) => attention(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
    }
}

fn sim_config(a: &SimArgs) -> SimConfig {
    SimConfig {
        num_subcarriers: a.subcarriers,
        subcarrier_spacing: a.spacing,
        num_frames: a.frames,
        frame_interval: a.interval,
        num_antennas: a.antennas,
        carrier_freq: a.carrier,
        user_speed: a.speed,
        taps: TapSpec::exponential_profile(a.taps, a.rms_delay, a.tap_spacing),
        antenna_correlation: a.rho,
        seed: a.seed,
    }
}

fn simulate(a: SimulateArgs, out: &Path) -> CmdResult {
    let cfg = sim_config(&a.sim);
    let mut grid = generate_channel(&cfg)?;
    if a.gain != 1.0 {
        let g = a.gain;
        grid = grid.map(|v| v * g);
    }
    if !a.contaminate.is_empty() {
        let interferer = generate_channel(&SimConfig { seed: a.interferer_seed, ..cfg.clone() })?;
        for &f in &a.contaminate {
            grid = inject_contamination(&grid, f, &interferer, a.sir_db)?;
        }
    }
    write_file(out, &a.output, |w| Ok(write_dataset(&grid, w)?))?;
    println!(
        "wrote {} ({} subcarriers x {} frames x {} antennas)",
        out.join(&a.output).display(),
        grid.num_subcarriers(),
        grid.num_frames(),
        grid.num_antennas()
    );
    Ok(())
}

fn bit_equal(a: &[Complex64], b: &[Complex64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x.re.to_bits() == y.re.to_bits() && x.im.to_bits() == y.im.to_bits())
}

fn verify(a: VerifyArgs, out: &Path) -> CmdResult {
    let g = read_grid(&a.dataset)?;
    let identical = (1..g.num_frames()).all(|n| bit_equal(g.frame(0), g.frame(n)));
    let rows = [
        ("subcarriers", g.num_subcarriers().to_string()),
        ("frames", g.num_frames().to_string()),
        ("antennas", g.num_antennas().to_string()),
        ("mean_power", format!("{:?}", mean_power(&g))),
        ("identical_frames", identical.to_string()),
    ];
    for (k, v) in &rows {
        println!("{k}\t{v}");
    }
    write_report(out, "verify.tsv", &rows)
}

fn sim_stats(a: SimStatsArgs, out: &Path) -> CmdResult {
    let cfg = sim_config(&a.sim);
    let stats = ensemble_stats(&cfg, a.realizations)?;
    let analytic = analytic_frequency_correlation(&cfg, cfg.num_subcarriers);
    let rms = rms_distance(&stats.frequency_correlation, &analytic);
    write_file(out, "sim_stats_curve.tsv", |w| {
        writeln!(w, "lag\tempirical_re\tempirical_im\tanalytic_re\tanalytic_im")?;
        for (d, (e, t)) in stats.frequency_correlation.iter().zip(&analytic).enumerate() {
            writeln!(w, "{d}\t{:?}\t{:?}\t{:?}\t{:?}", e.re, e.im, t.re, t.im)?;
        }
        Ok(())
    })?;
    let mut rows = vec![
        ("realizations", a.realizations.to_string()),
        ("frequency_rms_error", format!("{rms:?}")),
        ("mean_power", format!("{:?}", stats.mean_power)),
        ("configured_rho", format!("{:?}", cfg.antenna_correlation)),
    ];
    if let Some(c) = stats.antenna_correlation {
        rows.push(("antenna_correlation", format!("{c:?}")));
    }
    for (k, v) in &rows {
        println!("{k}\t{v}");
    }
    write_report(out, "sim_stats.tsv", &rows)
}

fn write_vocab(out: &Path, name: &str, v: &Vocabulary) -> CmdResult {
    write_file(out, name, |w| Ok(v.write(w)?))
}

fn write_features(out: &Path, f: &FeatureMap) -> CmdResult {
    write_file(out, "features.tsv", |w| Ok(f.write(w)?))
}

/// Feature map shared by all grids.
fn common_features(grids: &[ChannelGrid]) -> CmdResult<FeatureMap> {
    let first = FeatureMap::for_grid(grids[0].meta());
    for g in &grids[1..] {
        first.check_compatible(&FeatureMap::for_grid(g.meta()))?;
    }
    Ok(first)
}

fn vocab(a: VocabArgs, out: &Path) -> CmdResult {
    let grids = read_grids(&a.dataset)?;
    let features = common_features(&grids)?;
    let v = build_vocabulary(&grids, a.size)?;
    write_vocab(out, "vocab.tsv", &v)?;
    write_features(out, &features)?;
    println!("vocabulary of {} tokens ({} channel entries)", v.size(), v.num_channel_entries());
    Ok(())
}

fn tokenize(a: TokenizeArgs, out: &Path) -> CmdResult {
    let v = read_vocab(&a.vocab)?;
    write_vocab(out, "vocab.roundtrip.tsv", &v)?;
    let g = read_grid(&a.dataset)?;
    let (mut hits, mut components) = (0usize, 0usize);
    let (mut max_rel, mut sum_rel, mut sq) = (0.0f64, 0.0, 0.0);
    for &x in g.values() {
        sq += (v.decode(v.encode(x)?)? - x).norm_sqr();
        let q = quantize(x)?;
        let Some(id) = v.lookup(q) else { continue };
        hits += 1;
        let d = v.decode(id)?;
        for (orig, dec) in [(x.re, d.re), (x.im, d.im)] {
            if orig != 0.0 {
                let rel = (dec - orig).abs() / orig.abs();
                max_rel = max_rel.max(rel);
                sum_rel += rel;
                components += 1;
            }
        }
    }
    let rows = [
        ("values", g.values().len().to_string()),
        ("in_vocab", hits.to_string()),
        ("components", components.to_string()),
        ("max_relative_error", format!("{max_rel:?}")),
        ("mean_relative_error", format!("{:?}", sum_rel / components.max(1) as f64)),
        ("round_trip_mse", format!("{:?}", sq / g.values().len() as f64)),
        ("mean_power", format!("{:?}", mean_power(&g))),
    ];
    for (k, v) in &rows {
        println!("{k}\t{v}");
    }
    write_report(out, "tokenize.tsv", &rows)
}

fn encode_all(grids: &[ChannelGrid], v: &Vocabulary) -> CmdResult<Vec<TokenGrid>> {
    Ok(grids.iter().map(|g| TokenGrid::encode(g, v)).collect::<Result<_, Error>>()?)
}

fn check_vocab(model: &Model, v: &Vocabulary) -> CmdResult {
    if model.config.vocab_size != v.size() {
        return Err(Error::ShapeMismatch(format!(
            "vocabulary has {} tokens, model expects {}",
            v.size(),
            model.config.vocab_size
        ))
        .into());
    }
    Ok(())
}

fn save_model(out: &Path, name: &str, model: &Model, extras: &[ExtraTensor]) -> CmdResult {
    write_file(out, name, |w| Ok(write_checkpoint(model, extras, w)?))
}

fn pretrain(a: PretrainArgs, out: &Path) -> CmdResult {
    let grids = read_grids(&a.dataset)?;
    let features = common_features(&grids)?;
    let eval_grids = read_grids(&a.eval_dataset)?;
    for g in &eval_grids {
        features.check_compatible(&FeatureMap::for_grid(g.meta()))?;
    }
    let v = match &a.vocab {
        Some(p) => read_vocab(p)?,
        None => {
            let v = build_vocabulary(&grids, a.vocab_size)?;
            write_vocab(out, "vocab.tsv", &v)?;
            v
        }
    };
    write_features(out, &features)?;
    let train = encode_all(&grids, &v)?;
    let eval_set = if eval_grids.is_empty() { train.clone() } else { encode_all(&eval_grids, &v)? };

    let layout = train[0].layout();
    let model_config = ModelConfig {
        num_layers: a.model.layers,
        hidden_size: a.model.hidden,
        num_heads: a.model.heads,
        ffn_size: a.model.ffn,
        vocab_size: v.size(),
        max_freq_features: layout.num_subcarriers,
        max_time_features: 2,
        max_antenna_features: layout.num_antennas,
        max_seq_len: layout.len(),
        dropout_rate: a.model.dropout,
        tie_mlm_weights: a.model.tie_weights,
    };
    let config = PretrainConfig {
        batch_size: a.batch,
        mask_rate: a.mask_rate,
        nfp_negative_rate: a.negative_rate,
        negative_min_gap: a.negative_gap,
        learning_rate_peak: a.lr,
        epochs: a.epochs,
        clip_norm: a.clip,
        seed: a.seed,
        ..PretrainConfig::default()
    };
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = read_model(p)?;
            if ck.model.config != model_config {
                return Err(Error::ShapeMismatch("checkpoint model does not match the requested configuration".into()).into());
            }
            Trainer::resume(ck, &train, config.clone())?
        }
        None => Trainer::new(Model::init(model_config, a.seed)?, &train, config.clone())?,
    };
    trainer.config = match a.steps {
        Some(steps) => PretrainConfig {
            total_steps: steps,
            warmup_steps: ((steps as f64) * a.warmup_fraction).round() as usize,
            ..config
        },
        None => config.with_schedule_for(trainer.num_anchors(), a.warmup_fraction),
    };
    trainer.config.validate()?;
    eprintln!(
        "{} anchors, {} steps per epoch, {} steps total, starting at step {}",
        trainer.num_anchors(),
        trainer.steps_per_epoch(),
        trainer.config.total_steps,
        trainer.steps_done()
    );

    let mut metrics = Vec::new();
    let mut epochs = Vec::new();
    let every = a.checkpoint_every;
    trainer.run(
        |t, m| {
            metrics.push(*m);
            if m.step % 50 == 0 {
                eprintln!("step {}\tlr {:.3e}\tmlm {:.4}\tnfp {:.4}", m.step, m.lr, m.mlm_loss, m.nfp_loss);
            }
            if every > 0 && m.step % every == 0 {
                save_model(out, &format!("checkpoint-{}.rcmp", m.step), &t.model, &t.checkpoint_extras())
                    .map_err(|f| match f {
                        Failure::Core(e) => e,
                        other => Error::InvalidConfig(other.to_string()),
                    })?;
            }
            Ok(())
        },
        |t, epoch| {
            let e = evaluate(&t.model, &eval_set, a.eval_examples, &t.config, t.config.seed)?;
            eprintln!(
                "epoch {epoch}\tmlm_loss {:.4}\tmlm_acc {:.4}\tnfp_loss {:.4}\tnfp_acc {:.4}",
                e.mlm_loss, e.mlm_accuracy, e.nfp_loss, e.nfp_accuracy
            );
            epochs.push((epoch, t.steps_done(), e));
            Ok(())
        },
    )?;

    save_model(out, "model.rcmp", &trainer.model, &trainer.checkpoint_extras())?;
    write_file(out, "metrics.tsv", |w| {
        writeln!(w, "{METRICS_HEADER}")?;
        for m in &metrics {
            write_metrics_line(w, m)?;
        }
        Ok(())
    })?;
    write_file(out, "epoch_eval.tsv", |w| {
        writeln!(w, "epoch\tstep\tmlm_loss\tmlm_accuracy\tnfp_loss\tnfp_accuracy")?;
        for (epoch, step, e) in &epochs {
            writeln!(w, "{epoch}\t{step}\t{:?}\t{:?}\t{:?}\t{:?}", e.mlm_loss, e.mlm_accuracy, e.nfp_loss, e.nfp_accuracy)?;
        }
        Ok(())
    })?;
    println!("trained to step {}; wrote {}", trainer.steps_done(), out.join("model.rcmp").display());
    Ok(())
}

/// Checkpoint, vocabulary and optional feature-map check against `grids`.
fn load(inputs: &ModelInputs, grids: &[ChannelGrid]) -> CmdResult<(Model, Vocabulary)> {
    let model = read_model(&inputs.checkpoint)?.model;
    let v = read_vocab(&inputs.vocab)?;
    check_vocab(&model, &v)?;
    if let Some(p) = &inputs.features {
        let map = read_features(p)?;
        for g in grids {
            map.check_compatible(&FeatureMap::for_grid(g.meta()))?;
        }
    }
    Ok((model, v))
}

fn eval(a: EvalArgs, out: &Path) -> CmdResult {
    let grids = read_grids(&a.dataset)?;
    let (model, v) = load(&a.inputs, &grids)?;
    let data = encode_all(&grids, &v)?;
    let cfg = PretrainConfig { seed: a.seed, ..PretrainConfig::default() };
    let e = evaluate(&model, &data, a.examples, &cfg, a.seed)?;
    let mut rows = vec![
        ("mlm_loss", format!("{:?}", e.mlm_loss)),
        ("mlm_accuracy", format!("{:?}", e.mlm_accuracy)),
        ("nfp_loss", format!("{:?}", e.nfp_loss)),
        ("nfp_accuracy", format!("{:?}", e.nfp_accuracy)),
        ("masked", e.masked.to_string()),
        ("examples", e.examples.to_string()),
    ];
    if a.pll_sequences > 0 {
        let pp = mean_perplexity(&model, &v, &grids[0], 1.0, a.pll_sequences)?;
        rows.push(("perplexity", format!("{pp:?}")));
    }
    for (k, v) in &rows {
        println!("{k}\t{v}");
    }
    write_report(out, "eval.tsv", &rows)
}

fn find_scale_cmd(a: FindScaleArgs, out: &Path) -> CmdResult {
    let grid = read_grid(&a.dataset)?;
    let (model, v) = load(&a.inputs, std::slice::from_ref(&grid))?;
    let search = ScaleSearchConfig {
        s_min: a.s_min,
        s_max: a.s_max,
        num_points: a.points,
        spacing: match a.spacing {
            SpacingArg::Log => Spacing::Log,
            SpacingArg::Linear => Spacing::Linear,
        },
        refine: a.refine,
        eval_sequences: a.eval_sequences,
    };
    let found = find_scale(&model, &v, &grid, &search)?;
    write_file(out, "scale_trace.tsv", |w| Ok(rcm_core::comprehend::write_scale_trace(w, &found.trace)?))?;
    println!("best_scale\t{:?}\nperplexity\t{:?}", found.best.scale, found.best.perplexity);
    write_report(
        out,
        "find_scale.tsv",
        &[("best_scale", format!("{:?}", found.best.scale)), ("perplexity", format!("{:?}", found.best.perplexity))],
    )
}

fn transfer(a: TransferArgs, out: &Path) -> CmdResult {
    let Some(features) = &a.inputs.features else {
        return Err(Failure::Usage(
            "transfer needs the source model's feature map (--features); refusing to adapt without it".into(),
        ));
    };
    let source_map = read_features(features)?;
    let target = read_grid(&a.dataset)?;
    let model = read_model(&a.inputs.checkpoint)?.model;
    let v = read_vocab(&a.inputs.vocab)?;
    check_vocab(&model, &v)?;
    let target_map = FeatureMap::for_grid(target.meta());
    let eval_grid = match &a.eval_dataset {
        Some(p) => read_grid(p)?,
        None => target.clone(),
    };
    let scaled = scale_channel(&target, a.scale)?;
    let data = encode_all(std::slice::from_ref(&scaled), &v)?;
    let config = PretrainConfig {
        batch_size: a.batch,
        learning_rate_peak: a.lr,
        total_steps: a.steps,
        warmup_steps: 0,
        epochs: 1,
        seed: a.seed,
        ..PretrainConfig::default()
    };
    let before = mean_perplexity(&model, &v, &eval_grid, a.scale, a.pll_sequences)?;
    let adapted = transfer_adapt(&model, &data, &source_map, &target_map, config)?;
    let after = mean_perplexity(&adapted, &v, &eval_grid, a.scale, a.pll_sequences)?;
    save_model(out, "adapted.rcmp", &adapted, &[])?;
    write_features(out, &target_map)?;
    let rows = [
        ("scale", format!("{:?}", a.scale)),
        ("steps", a.steps.to_string()),
        ("perplexity_before", format!("{before:?}")),
        ("perplexity_after", format!("{after:?}")),
    ];
    for (k, v) in &rows {
        println!("{k}\t{v}");
    }
    write_report(out, "transfer.tsv", &rows)
}

/// Sequences for consecutive pairs `(t, t + 1)`.
fn pair_sequences(tokens: &TokenGrid) -> CmdResult<Vec<SequenceExample>> {
    Ok((0..tokens.num_frames().saturating_sub(1))
        .map(|t| tokens.sequence((t, t + 1)))
        .collect::<Result<_, Error>>()?)
}

fn detect(a: DetectArgs, out: &Path) -> CmdResult {
    let grid = read_grid(&a.dataset)?;
    let (model, v) = load(&a.inputs, std::slice::from_ref(&grid))?;
    let seqs = pair_sequences(&TokenGrid::encode(&grid, &v)?)?;
    let found: Vec<_> = seqs
        .par_iter()
        .map(|s| detect_contamination_at(&model, s, a.threshold))
        .collect::<Result<_, Error>>()?;
    let flagged = found.iter().filter(|d| d.decision == Decision::Anomalous).count();
    write_file(out, "detect.tsv", |w| {
        writeln!(w, "frame\tmargin\tdecision")?;
        for (t, d) in found.iter().enumerate() {
            let label = match d.decision {
                Decision::Consecutive => "consecutive",
                Decision::Anomalous => "anomalous",
            };
            writeln!(w, "{}\t{:?}\t{label}", t + 1, d.margin)?;
        }
        Ok(())
    })?;
    println!("{flagged} of {} frame pairs flagged", found.len());
    Ok(())
}

fn frame_mse(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>() / a.len() as f64
}

fn mitigate(a: MitigateArgs, out: &Path) -> CmdResult {
    let grid = read_grid(&a.dataset)?;
    let (model, v) = load(&a.inputs, std::slice::from_ref(&grid))?;
    let truth = a.truth.as_deref().map(read_grid).transpose()?;
    if let Some(t) = &truth {
        if t.meta().len() != grid.meta().len() || t.num_subcarriers() != grid.num_subcarriers() {
            return Err(Error::ShapeMismatch("truth dataset differs in shape".into()).into());
        }
    }
    let tokens = TokenGrid::encode(&grid, &v)?;
    let frames: Vec<usize> = if a.frames.is_empty() {
        let seqs = pair_sequences(&tokens)?;
        let mut flagged = Vec::new();
        for (t, s) in seqs.iter().enumerate() {
            if detect_contamination_at(&model, s, 0.0)?.decision == Decision::Anomalous {
                flagged.push(t + 1);
            }
        }
        flagged
    } else {
        a.frames.clone()
    };
    if let Some(&f) = frames.iter().find(|&&f| f == 0 || f >= grid.num_frames()) {
        return Err(Error::OutOfRange(format!("frame {f} has no predecessor in {} frames", grid.num_frames())).into());
    }
    let (ns, na) = (grid.num_subcarriers(), grid.num_antennas());
    let recon: Vec<Vec<Complex64>> = frames
        .par_iter()
        .map(|&f| {
            // antenna-major, subcarrier-fastest: the same order as a stored frame
            let r = mitigate_contamination(&model, &v, &tokens.sequence((f - 1, f))?)?;
            debug_assert_eq!(r.len(), ns * na);
            Ok(r)
        })
        .collect::<Result<_, Error>>()?;
    let mut values = grid.values().to_vec();
    let flen = grid.meta().frame_len();
    for (&f, r) in frames.iter().zip(&recon) {
        values[f * flen..(f + 1) * flen].copy_from_slice(r);
    }
    let repaired = ChannelGrid::new(*grid.meta(), values)?;
    write_file(out, "mitigated.cfrd", |w| Ok(write_dataset(&repaired, w)?))?;
    let (mut better, mut sum_r, mut sum_c) = (0usize, 0.0, 0.0);
    write_file(out, "mitigate.tsv", |w| {
        match &truth {
            Some(_) => writeln!(w, "frame\tmse_reconstructed\tmse_contaminated")?,
            None => writeln!(w, "frame\tmse_change")?,
        }
        for (&f, r) in frames.iter().zip(&recon) {
            match &truth {
                Some(t) => {
                    let mr = frame_mse(r, t.frame(f));
                    let mc = frame_mse(grid.frame(f), t.frame(f));
                    better += usize::from(mr < mc);
                    sum_r += mr;
                    sum_c += mc;
                    writeln!(w, "{f}\t{mr:?}\t{mc:?}")?;
                }
                None => writeln!(w, "{f}\t{:?}", frame_mse(r, grid.frame(f)))?,
            }
        }
        Ok(())
    })?;
    if truth.is_some() && !frames.is_empty() {
        let n = frames.len() as f64;
        println!("frames\t{}\nimproved\t{better}\nmean_mse_reconstructed\t{:?}\nmean_mse_contaminated\t{:?}", frames.len(), sum_r / n, sum_c / n);
    } else {
        println!("reconstructed {} frames", frames.len());
    }
    Ok(())
}

fn compress_cmd(a: CompressArgs, out: &Path) -> CmdResult {
    let dims = match (&a.checkpoint, &a.vocab, &a.dataset) {
        (None, None, None) => CompressionDims {
            subcarriers: a.subcarriers,
            frames: a.frames,
            antennas: a.antennas,
            components: 2,
            batch: a.batch,
            hidden: a.hidden,
        },
        (Some(c), Some(vp), Some(d)) => {
            let grid = read_grid(d)?;
            let inputs = ModelInputs { checkpoint: c.clone(), vocab: vp.clone(), features: None };
            let (model, v) = load(&inputs, std::slice::from_ref(&grid))?;
            let seqs = pair_sequences(&TokenGrid::encode(&grid, &v)?)?;
            let end = a.start + a.batch as usize;
            if end > seqs.len() {
                return Err(Error::OutOfRange(format!("sequences {}..{end} of {}", a.start, seqs.len())).into());
            }
            let rep = compress(&model, &seqs[a.start..end])?;
            write_file(out, "representation.tsv", |w| {
                writeln!(w, "index\tvalue")?;
                for (i, x) in rep.iter().enumerate() {
                    writeln!(w, "{i}\t{x:?}")?;
                }
                Ok(())
            })?;
            CompressionDims {
                subcarriers: grid.num_subcarriers() as u64,
                frames: 2,
                antennas: grid.num_antennas() as u64,
                components: 2,
                batch: a.batch,
                hidden: model.config.hidden_size as u64,
            }
        }
        _ => return Err(Failure::Usage("--checkpoint, --vocab and --dataset go together".into())),
    };
    let r = compression_ratio(dims)?;
    let gamma = if *r.denom() == 1 { r.numer().to_string() } else { format!("{}/{}", r.numer(), r.denom()) };
    println!("gamma\t{gamma}");
    write_report(out, "compress.tsv", &[("gamma", gamma)])
}

fn fingerprint_cmd(a: FingerprintArgs, out: &Path) -> CmdResult {
    let grids = read_grids(&a.dataset)?;
    let (model, v) = load(&a.inputs, &grids)?;
    if a.count == 0 || a.stride == 0 {
        return Err(Failure::Usage("--count and --stride must be positive".into()));
    }
    let mut jobs = Vec::new();
    for (label, g) in grids.iter().enumerate() {
        let seqs = pair_sequences(&TokenGrid::encode(g, &v)?)?;
        let starts: Vec<usize> = (0..)
            .map(|i| i * a.stride)
            .take_while(|s| s + a.count <= seqs.len())
            .take(a.limit.unwrap_or(usize::MAX))
            .collect();
        jobs.push((label, seqs, starts));
    }
    let model = &model;
    let count = a.count;
    let rows: Vec<(usize, usize, Vec<f64>)> = jobs
        .par_iter()
        .flat_map(|(label, seqs, starts)| {
            starts.par_iter().map(move |&s| {
                let fp = fingerprint(model, &seqs[s..s + count], s, count)?;
                Ok((*label, s, fp.vector))
            })
        })
        .collect::<Result<_, Error>>()?;
    write_file(out, "fingerprints.tsv", |w| write_fingerprints(w, &rows))?;
    println!("{} fingerprints", rows.len());
    Ok(())
}

pub fn write_fingerprints<W: Write>(w: &mut W, rows: &[(usize, usize, Vec<f64>)]) -> CmdResult {
    writeln!(w, "label\tstart\tvector")?;
    for (label, start, vec) in rows {
        write!(w, "{label}\t{start}")?;
        for x in vec {
            write!(w, "\t{x:?}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn read_fingerprints(path: &Path) -> CmdResult<(Vec<usize>, Vec<Vec<f64>>)> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("input file {} does not exist", path.display())));
    }
    let bad = |line: usize, d: &str| Failure::Core(Error::Format { what: "fingerprint file", detail: format!("line {line}: {d}") });
    let (mut labels, mut vectors) = (Vec::new(), Vec::new());
    let text = fs::read_to_string(path)?;
    for (i, line) in text.as_bytes().lines().enumerate().skip(1) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        let label = cols.next().and_then(|c| c.parse().ok()).ok_or_else(|| bad(i + 1, "bad label"))?;
        cols.next().ok_or_else(|| bad(i + 1, "missing start"))?;
        let vec: Vec<f64> = cols.map(|c| c.parse().map_err(|_| bad(i + 1, "bad value"))).collect::<CmdResult<_>>()?;
        if vec.is_empty() || vectors.first().is_some_and(|f: &Vec<f64>| f.len() != vec.len()) {
            return Err(bad(i + 1, "inconsistent vector length"));
        }
        labels.push(label);
        vectors.push(vec);
    }
    Ok((labels, vectors))
}

fn chart(a: ChartArgs, out: &Path) -> CmdResult {
    let (labels, vectors) = read_fingerprints(&a.fingerprints)?;
    let cfg = TsneConfig {
        perplexity: a.perplexity,
        iterations: a.iterations,
        learning_rate: a.learning_rate,
        seed: a.seed,
        ..TsneConfig::default()
    };
    let res = tsne(&vectors, &cfg)?;
    let points = chart_points(&res.embedding, &labels)?;
    write_file(out, &a.output, |w| Ok(write_chart(w, &points)?))?;
    let target = a.perplexity.log2();
    let entropy_error = res.entropies.iter().fold(0.0f64, |m, h| m.max((h - target).abs()));
    let rows = [
        ("points", points.len().to_string()),
        ("perplexity", format!("{:?}", a.perplexity)),
        ("max_entropy_error", format!("{entropy_error:?}")),
        ("initial_kl", format!("{:?}", res.initial_kl)),
        ("final_kl", format!("{:?}", res.final_kl)),
    ];
    for (k, v) in &rows {
        println!("{k}\t{v}");
    }
    let stem = Path::new(&a.output).file_stem().map_or("chart".into(), |s| s.to_string_lossy().into_owned());
    write_report(out, &format!("{stem}_report.tsv"), &rows)
}

fn attention(a: AttentionArgs, out: &Path) -> CmdResult {
    let grid = read_grid(&a.dataset)?;
    let (mut model, v) = load(&a.inputs, std::slice::from_ref(&grid))?;
    if a.uniform {
        make_attention_uniform(&mut model);
    }
    let seq = TokenGrid::encode(&grid, &v)?.sequence((a.frame, a.frame + 1))?;
    let profile = attention_domain_profile(&model, &seq, a.radius)?;
    write_file(out, "attention.tsv", |w| Ok(write_attention_profile(w, &profile)?))?;
    let shares = uniform_bucket_shares(&seq, a.radius)?;
    let row_error = max_attention_row_error(&model, &seq)?;
    let (mut sum_error, mut min_fraction, mut share_dev) = (0.0f64, f64::INFINITY, 0.0f64);
    for p in &profile {
        let f = p.fractions();
        sum_error = sum_error.max((f.iter().sum::<f64>() - 1.0).abs());
        min_fraction = f.iter().copied().fold(min_fraction, f64::min);
        share_dev = f.iter().zip(&shares).fold(share_dev, |m, (x, s)| m.max((x - s).abs()));
    }
    let rows = [
        ("heads", profile.len().to_string()),
        ("max_row_sum_error", format!("{row_error:?}")),
        ("max_fraction_sum_error", format!("{sum_error:?}")),
        ("min_fraction", format!("{min_fraction:?}")),
        ("uniform_freq_local", format!("{:?}", shares[0])),
        ("uniform_cross_time", format!("{:?}", shares[1])),
        ("uniform_cross_antenna", format!("{:?}", shares[2])),
        ("uniform_special", format!("{:?}", shares[3])),
        ("max_uniform_deviation", format!("{share_dev:?}")),
    ];
    for (k, v) in &rows {
        println!("{k}\t{v}");
    }
    write_report(out, "attention_check.tsv", &rows)
}

fn gradcheck(a: GradcheckArgs, out: &Path) -> CmdResult {
    let variants = [
        ("plain", gradcheck_config(0.0, false)),
        ("tied", gradcheck_config(0.0, true)),
        ("dropout", gradcheck_config(a.dropout, false)),
    ];
    let results: Vec<(&str, Vec<_>)> = variants
        .into_iter()
        .map(|(name, cfg)| Ok((name, gradient_check(cfg, a.seed, a.step, GRADCHECK_FLOOR)?)))
        .collect::<Result<_, Error>>()?;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    write_file(out, "gradcheck.tsv", |w| {
        writeln!(w, "variant\ttensor\trelative_error")?;
        for (name, checks) in &results {
            for c in checks {
                writeln!(w, "{name}\t{}\t{:?}", c.name, c.relative_error)?;
                let e = worst.entry(name).or_insert(0.0);
                *e = e.max(c.relative_error);
            }
        }
        Ok(())
    })?;
    let overall = worst.values().copied().fold(0.0f64, f64::max);
    for (name, e) in &worst {
        println!("{name}\t{e:?}");
    }
    println!("max_relative_error\t{overall:?}");
    if overall > a.tolerance {
        return Err(Failure::Numeric(format!("gradient check failed: {overall:e} > {:e}", a.tolerance)));
    }
    Ok(())
}
