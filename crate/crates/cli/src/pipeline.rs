//! Subcommand bodies. Each step reads its inputs from the directories named
//! in the run config and writes its outputs plus a config snapshot.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nxsg::corpus::{generate_corpus, load_split, nmf_pool, to_examples, ManifestRow};
use nxsg::distill::{distill_proxy, train_teacher, Example, TrainLog};
use nxsg::dsp::{read_wav, Stft, StftConfig, SAMPLE_RATE};
use nxsg::evalseg::{
    binarize, format_table, frame_f1, frames_to_segments, median_filter, parse_segments,
    write_report_csv, write_segments, Counts, F1Report,
};
use nxsg::explain::{
    project_to_frequency, rescore_filtered, score_curve, segment_relevance, tau_grid,
    top_fraction_tau, RelevanceVector,
};
use nxsg::nmf::{pretrain, Dictionary};
use nxsg::segnet::{ProxyModel, TeacherModel};
use nxsg::tensor::Tensor;
use nxsg::{Class, NUM_CLASSES};

use crate::config::RunConfig;
use crate::plot::{bar_chart, line_chart};
use crate::UsageError;

pub const DICTIONARY_FILE: &str = "dictionary.ckpt";
pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const PROXY_FILE: &str = "proxy.ckpt";

fn stft() -> Result<Stft> {
    Ok(Stft::new(StftConfig::default(), SAMPLE_RATE)?)
}

fn frame_step_s() -> Result<f64> {
    Ok(stft()?.hop() as f64 / SAMPLE_RATE as f64)
}

/// Fails with a usage error when an upstream artefact is missing.
pub fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(UsageError(format!("{} not found; {hint}", path.display())).into())
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".into())
}

pub fn gen_corpus(cfg: &RunConfig) -> Result<Vec<ManifestRow>> {
    let dir = cfg.path("corpus_dir");
    let rows = generate_corpus(&dir, &cfg.corpus()?)?;
    cfg.write_snapshot(&dir)?;
    Ok(rows)
}

fn examples(cfg: &RunConfig, split: &str) -> Result<Vec<Example>> {
    let dir = cfg.path("corpus_dir");
    require(&dir.join(split), "run gen-corpus first")?;
    Ok(to_examples(&load_split(&dir, split)?)?)
}

pub fn train_nmf(cfg: &RunConfig) -> Result<Dictionary> {
    let dir = cfg.path("nmf_dir");
    fs::create_dir_all(&dir)?;
    let pre = cfg.pretrain()?;
    let pool = nmf_pool(&pre.mix.counts(pre.pool_size), cfg.seed()? ^ 0x9001)?;
    let fit = pretrain(&pool, &pre)?;
    fit.dictionary.save(dir.join(DICTIONARY_FILE))?;
    fit.dictionary.write_csv(create(&dir.join("dictionary.csv"))?, stft()?.bin_hz())?;
    let mut trace = String::from("iter,objective\n");
    for (i, v) in fit.objective_trace.iter().enumerate() {
        trace.push_str(&format!("{i},{v}\n"));
    }
    fs::write(dir.join("objective.csv"), trace)?;
    let xs: Vec<f64> = (0..fit.objective_trace.len()).map(|i| i as f64).collect();
    fs::write(
        dir.join("objective.svg"),
        line_chart("NMF objective", "iteration", "objective", &xs, &[("objective", &fit.objective_trace)]),
    )?;
    cfg.write_snapshot(&dir)?;
    Ok(fit.dictionary)
}

fn write_logs(dir: &Path, log: &TrainLog) -> Result<()> {
    log.write_steps_csv(create(&dir.join("steps.csv"))?)?;
    log.write_epochs_csv(create(&dir.join("epochs.csv"))?)?;
    let xs: Vec<f64> = log.epochs.iter().map(|e| e.epoch as f64).collect();
    let train: Vec<f64> = log.epochs.iter().map(|e| e.train_loss).collect();
    let val: Vec<f64> = log.epochs.iter().map(|e| e.val_loss).collect();
    fs::write(
        dir.join("loss.svg"),
        line_chart("Training loss", "epoch", "loss", &xs, &[("train", &train), ("val", &val)]),
    )?;
    Ok(())
}

fn per_epoch_dir(dir: &Path) -> Result<PathBuf> {
    let d = dir.join("epochs");
    fs::create_dir_all(&d)?;
    Ok(d)
}

pub fn train_teacher_step(cfg: &RunConfig) -> Result<TeacherModel> {
    let dir = cfg.path("teacher_dir");
    let train = examples(cfg, "train")?;
    let val = examples(cfg, "val")?;
    let mut tc = cfg.teacher_training()?;
    tc.checkpoint_dir = Some(per_epoch_dir(&dir)?);
    let model = TeacherModel::new(cfg.teacher_net()?, cfg.seed()?)?;
    let trained = train_teacher(model, &train, &val, &tc)?;
    trained.model.save(dir.join(TEACHER_FILE))?;
    write_logs(&dir, &trained.log)?;
    cfg.write_snapshot(&dir)?;
    Ok(trained.model)
}

pub fn load_teacher(cfg: &RunConfig) -> Result<TeacherModel> {
    let path = cfg.path("teacher_dir").join(TEACHER_FILE);
    require(&path, "run train-teacher first")?;
    Ok(TeacherModel::load(&path)?)
}

pub fn load_dictionary(cfg: &RunConfig) -> Result<Dictionary> {
    let path = cfg.path("nmf_dir").join(DICTIONARY_FILE);
    require(&path, "run train-nmf first")?;
    Ok(Dictionary::load(&path)?)
}

pub fn load_proxy(cfg: &RunConfig) -> Result<ProxyModel> {
    let path = cfg.path("proxy_dir").join(PROXY_FILE);
    require(&path, "run distill first")?;
    Ok(ProxyModel::load(&path)?)
}

pub fn distill(cfg: &RunConfig) -> Result<ProxyModel> {
    let dir = cfg.path("proxy_dir");
    let teacher = load_teacher(cfg)?;
    let dictionary = load_dictionary(cfg)?;
    if dictionary.rank() != cfg.rank()? {
        return Err(UsageError(format!(
            "dictionary has rank {} but nmf.rank = {}; rerun train-nmf",
            dictionary.rank(),
            cfg.rank()?
        ))
        .into());
    }
    let train = examples(cfg, "train")?;
    let val = examples(cfg, "val")?;
    let mut tc = cfg.proxy_training()?;
    tc.checkpoint_dir = Some(per_epoch_dir(&dir)?);
    let trained = distill_proxy(
        &teacher,
        dictionary,
        cfg.proxy_net()?,
        &train,
        &val,
        &cfg.weights()?,
        &tc,
    )?;
    trained.model.save(dir.join(PROXY_FILE))?;
    write_logs(&dir, &trained.log)?;
    cfg.write_snapshot(&dir)?;
    Ok(trained.model)
}

/// Either network, loaded from a checkpoint path.
pub enum Segmenter {
    Teacher(TeacherModel),
    Proxy(ProxyModel),
}

impl Segmenter {
    pub fn load(path: &Path) -> Result<Self> {
        require(path, "pass a checkpoint written by train-teacher or distill")?;
        match ProxyModel::load(path) {
            Ok(m) => Ok(Self::Proxy(m)),
            Err(_) => Ok(Self::Teacher(
                TeacherModel::load(path).with_context(|| format!("loading {}", path.display()))?,
            )),
        }
    }

    pub fn probs(&self, input: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Self::Teacher(m) => m.forward(input)?.probs,
            Self::Proxy(m) => m.forward(input)?.probs,
        })
    }
}

fn write_probs(path: &Path, probs: &Tensor, step: f64) -> Result<()> {
    let mut out = String::from("frame,time");
    for c in Class::ALL {
        out.push(',');
        out.push_str(c.name());
    }
    out.push('\n');
    for t in 0..probs.cols() {
        out.push_str(&format!("{t},{:.3}", t as f64 * step));
        for c in 0..NUM_CLASSES {
            out.push_str(&format!(",{}", probs.at(c, t)));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Hypothesis segments from model probabilities.
pub fn decide(probs: &Tensor, threshold: f64, median: usize, step: f64) -> Result<nxsg::evalseg::SegmentList> {
    let binary = median_filter(&binarize(probs, threshold), median)?;
    Ok(frames_to_segments(&binary, step, 0.0)?)
}

/// Writes `<stem>.seg` and `<stem>.probs.csv` for each input file.
pub fn segment(cfg: &RunConfig, model: &Path, wavs: &[PathBuf], out: &Path) -> Result<()> {
    let seg = Segmenter::load(model)?;
    segment_with(cfg, &seg, wavs, out)
}

pub fn segment_with(cfg: &RunConfig, seg: &Segmenter, wavs: &[PathBuf], out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let stft = stft()?;
    let step = frame_step_s()?;
    for wav in wavs {
        require(wav, "check the input path")?;
        let clip = read_wav(wav)?;
        let probs = seg.probs(&stft.log_spectrogram(&clip)?.bins)?;
        let id = stem(wav);
        write_probs(&out.join(format!("{id}.probs.csv")), &probs, step)?;
        let segs = decide(&probs, cfg.threshold()?, cfg.median()?, step)?;
        write_segments(create(&out.join(format!("{id}.seg")))?, &id, &segs)?;
    }
    cfg.write_snapshot(out)?;
    Ok(())
}

/// `.seg` files in a directory (sorted), or the path itself when it is a file.
fn seg_files(path: &Path) -> Result<Vec<PathBuf>> {
    require(path, "check the segment path")?;
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "seg"))
        .collect();
    files.sort();
    Ok(files)
}

fn hyp_file(hyp: &Path, id: &str) -> PathBuf {
    if hyp.is_file() {
        hyp.to_path_buf()
    } else {
        hyp.join(format!("{id}.seg"))
    }
}

/// Frame F1 of one hypothesis set against references, pooled over files.
/// Files are matched by stem; each file's id is its stem.
pub fn score(reference: &Path, hyp: &Path) -> Result<F1Report> {
    let step = frame_step_s()?;
    let mut report: Option<F1Report> = None;
    for ref_path in seg_files(reference)? {
        let id = stem(&ref_path);
        let r = parse_segments(&fs::read_to_string(&ref_path)?)?;
        let hp = hyp_file(hyp, &id);
        require(&hp, "every reference file needs a hypothesis with the same name")?;
        let h = parse_segments(&fs::read_to_string(&hp)?)?;
        let frames = r.num_frames(step).max(h.num_frames(step));
        // Nothing active on either side: only true negatives, which F1 ignores.
        let f = if frames == 0 {
            F1Report {
                classes: r.available.iter().map(|&a| a.then(Counts::default)).collect(),
            }
        } else {
            let labels = r.labels(&id, frames, step)?;
            let pred = h.labels(&id, frames, step)?.labels;
            frame_f1(&pred, &labels)?
        };
        match &mut report {
            Some(acc) => acc.merge(&f),
            None => report = Some(f),
        }
    }
    report.ok_or_else(|| UsageError(format!("no .seg files in {}", reference.display())).into())
}

/// Scores each named system and writes `report.txt` and `report.csv`.
pub fn eval(cfg: &RunConfig, reference: &Path, systems: &[(String, PathBuf)], out: &Path) -> Result<String> {
    let rows: Vec<(String, F1Report)> = systems
        .iter()
        .map(|(name, hyp)| Ok((name.clone(), score(reference, hyp)?)))
        .collect::<Result<_>>()?;
    fs::create_dir_all(out)?;
    let table = format_table(&rows);
    fs::write(out.join("report.txt"), &table)?;
    write_report_csv(create(&out.join("report.csv"))?, &rows)?;
    cfg.write_snapshot(out)?;
    Ok(table)
}

/// Explanations of one class for each file: relevance bars, frequency
/// projection, rescored probabilities and the score-versus-τ curve.
/// Without `tau`, the threshold keeping the top 10% of components is used.
pub fn explain(
    cfg: &RunConfig,
    model: &Path,
    wavs: &[PathBuf],
    class: Class,
    tau: Option<f64>,
    out: &Path,
) -> Result<Vec<RelevanceVector>> {
    require(model, "pass a checkpoint written by distill")?;
    let proxy = ProxyModel::load(model)
        .map_err(|e| UsageError(format!("{} is not a proxy checkpoint: {e}", model.display())))?;
    fs::create_dir_all(out)?;
    let stft = stft()?;
    let step = frame_step_s()?;
    let w = proxy.effective_dictionary();
    let mut all = Vec::new();
    for wav in wavs {
        require(wav, "check the input path")?;
        let id = stem(wav);
        let input = stft.log_spectrogram(&read_wav(wav)?)?.bins;
        let (rv, h) = segment_relevance(&proxy, &input, class)?;
        let tau = tau.unwrap_or_else(|| top_fraction_tau(&rv.r, 0.1));
        let filtered = rv.filter(tau);

        let theta = proxy.theta();
        let mut rel = String::from("component,z,theta,r,kept\n");
        for k in 0..rv.r.len() {
            rel.push_str(&format!(
                "{k},{},{},{},{}\n",
                rv.z[k],
                theta.at(k, class.index()),
                rv.r[k],
                u8::from(filtered.keep[k])
            ));
        }
        fs::write(out.join(format!("{id}.relevance.csv")), rel)?;
        fs::write(
            out.join(format!("{id}.relevance.svg")),
            bar_chart(&format!("{class} relevance, {id}"), "component", "r", &rv.r),
        )?;

        let freq = project_to_frequency(&filtered, &w, stft.bin_hz())?;
        let mut fcsv = String::from("hz,x\n");
        for (f, v) in freq.x.iter().enumerate() {
            fcsv.push_str(&format!("{},{v}\n", f as f64 * stft.bin_hz()));
        }
        fs::write(out.join(format!("{id}.frequency.csv")), fcsv)?;
        let hz: Vec<f64> = (0..freq.x.len()).map(|f| f as f64 * stft.bin_hz()).collect();
        fs::write(
            out.join(format!("{id}.frequency.svg")),
            line_chart(
                &format!("{class} frequency explanation, tau = {tau:.4}"),
                "Hz",
                "W R",
                &hz,
                &[(class.name(), &freq.x)],
            ),
        )?;

        let rescored = rescore_filtered(&proxy, &h, &filtered)?;
        write_probs(&out.join(format!("{id}.scores.csv")), &rescored.probs, step)?;

        let grid = tau_grid(&rv.r, cfg.tau_grid()?);
        let curve = score_curve(&proxy, &h, &rv, &grid)?;
        let mut ccsv = String::from("tau,score,selected\n");
        for i in 0..curve.taus.len() {
            ccsv.push_str(&format!("{},{},{}\n", curve.taus[i], curve.scores[i], curve.selected[i]));
        }
        fs::write(out.join(format!("{id}.curve.csv")), ccsv)?;
        fs::write(
            out.join(format!("{id}.curve.svg")),
            line_chart(
                &format!("{class} score versus tau, {id}"),
                "tau",
                "mean score",
                &curve.taus,
                &[(class.name(), &curve.scores)],
            ),
        )?;
        all.push(rv);
    }
    if all.len() > 1 {
        let mean = nxsg::explain::global_relevance(&all)?;
        let mut g = String::from("component,r_mean\n");
        for (k, v) in mean.iter().enumerate() {
            g.push_str(&format!("{k},{v}\n"));
        }
        fs::write(out.join("global.csv"), g)?;
        fs::write(
            out.join("global.svg"),
            bar_chart(&format!("{class} global relevance"), "component", "mean r", &mean),
        )?;
    }
    cfg.write_snapshot(out)?;
    Ok(all)
}

/// Segments the test split with both models and scores them.
pub fn evaluate_test_split(cfg: &RunConfig) -> Result<String> {
    let corpus = cfg.path("corpus_dir");
    let eval_dir = cfg.path("eval_dir");
    let wav_dir = corpus.join("test").join("wav");
    require(&wav_dir, "run gen-corpus first")?;
    let mut wavs: Vec<PathBuf> = fs::read_dir(&wav_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "wav"))
        .collect();
    wavs.sort();
    let mut systems = Vec::new();
    for (name, seg) in [
        ("teacher", Segmenter::Teacher(load_teacher(cfg)?)),
        ("proxy", Segmenter::Proxy(load_proxy(cfg)?)),
    ] {
        let dir = eval_dir.join(name);
        segment_with(cfg, &seg, &wavs, &dir)?;
        systems.push((name.to_string(), dir));
    }
    eval(cfg, &corpus.join("test").join("labels"), &systems, &eval_dir)
}

/// Every step from corpus generation to the test-split report.
pub fn run_all(cfg: &RunConfig) -> Result<String> {
    gen_corpus(cfg)?;
    train_nmf(cfg)?;
    train_teacher_step(cfg)?;
    distill(cfg)?;
    evaluate_test_split(cfg)
}
