//! Frame-level F1 scoring and conversion between frames and segments.
//!
//! Segment files hold one line per interval:
//!
//! ```text
//! SEG <class> <file-id> <onset> <duration>
//! ```
//!
//! Lines starting with `#` are comments, except `# classes: SAD,MD,...`,
//! which restricts the annotated classes of a reference file. Without it
//! every class counts as annotated.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use crate::classes::{Class, NUM_CLASSES};
use crate::distill::LabeledSegments;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `1` where `p > threshold`, else `0`.
pub fn binarize(probs: &Tensor, threshold: f64) -> Tensor {
    probs.map(|p| if p > threshold { 1.0 } else { 0.0 })
}

/// Sliding-window majority over a binary row (odd `width`; edges use the
/// available frames only).
pub fn median_filter(binary: &Tensor, width: usize) -> Result<Tensor> {
    if width == 0 || width.is_multiple_of(2) {
        return Err(Error::Config(format!("median width must be odd, got {width}")));
    }
    let (rows, t) = (binary.rows(), binary.cols());
    let half = width / 2;
    Ok(Tensor::from_fn(rows, t, |r, c| {
        let lo = c.saturating_sub(half);
        let hi = (c + half + 1).min(t);
        let ones = binary.row(r)[lo..hi].iter().filter(|&&v| v > 0.5).count();
        if 2 * ones > hi - lo {
            1.0
        } else {
            0.0
        }
    }))
}

/// Frame counts for one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// Positive reference frames.
    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Per-class counts; `None` for classes without reference annotation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct F1Report {
    pub classes: Vec<Option<Counts>>,
}

impl F1Report {
    pub fn get(&self, class: Class) -> Option<&Counts> {
        self.classes.get(class.index()).and_then(Option::as_ref)
    }

    pub fn f1(&self, class: Class) -> Option<f64> {
        self.get(class).map(Counts::f1)
    }

    /// Pools frame counts of another report into this one.
    pub fn merge(&mut self, other: &F1Report) {
        if self.classes.len() < other.classes.len() {
            self.classes.resize(other.classes.len(), None);
        }
        for (mine, theirs) in self.classes.iter_mut().zip(&other.classes) {
            if let Some(t) = theirs {
                let m = mine.get_or_insert_with(Counts::default);
                m.tp += t.tp;
                m.fp += t.fp;
                m.fn_ += t.fn_;
            }
        }
    }
}

/// Per-class frame precision, recall and F1. Unavailable classes are skipped.
pub fn frame_f1(pred: &Tensor, reference: &LabeledSegments) -> Result<F1Report> {
    let r = &reference.labels;
    if pred.shape() != r.shape() {
        return Err(Error::Shape {
            op: "frame_f1",
            left: pred.shape().to_vec(),
            right: r.shape().to_vec(),
        });
    }
    if r.cols() == 0 {
        return Err(Error::EmptyInput("no frames to score".into()));
    }
    let classes = (0..r.rows())
        .map(|c| {
            reference.available[c].then(|| {
                let mut k = Counts::default();
                for (&p, &y) in pred.row(c).iter().zip(r.row(c)) {
                    match (p > 0.5, y > 0.5) {
                        (true, true) => k.tp += 1,
                        (true, false) => k.fp += 1,
                        (false, true) => k.fn_ += 1,
                        (false, false) => {}
                    }
                }
                k
            })
        })
        .collect();
    Ok(F1Report { classes })
}

/// Sorted, non-overlapping `(onset, offset)` intervals per class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SegmentList {
    pub classes: Vec<Vec<(f64, f64)>>,
}

/// Maximal runs of ones become intervals `[start·step, end·step)`; runs
/// shorter than `min_dur_s` are dropped.
pub fn frames_to_segments(binary: &Tensor, frame_step_s: f64, min_dur_s: f64) -> Result<SegmentList> {
    if min_dur_s < 0.0 || !min_dur_s.is_finite() {
        return Err(Error::Config(format!("minimum duration must be ≥ 0, got {min_dur_s}")));
    }
    binary.require_rank2("frames_to_segments")?;
    let classes = (0..binary.rows())
        .map(|c| {
            let row = binary.row(c);
            let mut out = Vec::new();
            let mut t = 0;
            while t < row.len() {
                if row[t] > 0.5 {
                    let start = t;
                    while t < row.len() && row[t] > 0.5 {
                        t += 1;
                    }
                    let (on, off) = (start as f64 * frame_step_s, t as f64 * frame_step_s);
                    if off - on >= min_dur_s - 1e-12 {
                        out.push((on, off));
                    }
                } else {
                    t += 1;
                }
            }
            out
        })
        .collect();
    Ok(SegmentList { classes })
}

/// Frame `t` is active when its midpoint `(t + ½)·step` lies in an interval.
pub fn segments_to_frames(segments: &SegmentList, num_frames: usize, frame_step_s: f64) -> Tensor {
    let rows = segments.classes.len();
    let mut data = vec![0.0; rows * num_frames];
    for (c, list) in segments.classes.iter().enumerate() {
        for &(on, off) in list {
            let first = (on / frame_step_s - 0.5).ceil().max(0.0) as usize;
            for t in first..num_frames {
                let mid = (t as f64 + 0.5) * frame_step_s;
                if mid >= off {
                    break;
                }
                if mid >= on {
                    data[c * num_frames + t] = 1.0;
                }
            }
        }
    }
    Tensor::new(vec![rows, num_frames], data).expect("length matches")
}

/// Contents of one segment file.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentFile {
    /// Intervals keyed by file id.
    pub files: BTreeMap<String, SegmentList>,
    /// Annotated classes.
    pub available: Vec<bool>,
}

fn empty_list() -> SegmentList {
    SegmentList {
        classes: vec![Vec::new(); NUM_CLASSES],
    }
}

pub fn write_segments<W: Write>(mut w: W, file_id: &str, segments: &SegmentList) -> Result<()> {
    for (c, list) in segments.classes.iter().enumerate() {
        let class = Class::from_index(c)
            .ok_or_else(|| Error::Config(format!("no class with index {c}")))?;
        for &(on, off) in list {
            writeln!(w, "SEG {class} {file_id} {on:.3} {:.3}", off - on)?;
        }
    }
    Ok(())
}

pub fn parse_segments(text: &str) -> Result<SegmentFile> {
    let mut files: BTreeMap<String, SegmentList> = BTreeMap::new();
    let mut available = vec![true; NUM_CLASSES];
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(list) = comment.trim().strip_prefix("classes:") {
                available = vec![false; NUM_CLASSES];
                for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    available[name.parse::<Class>()?.index()] = true;
                }
            }
            continue;
        }
        let bad = |why: &str| Error::Format(format!("line {}: {why}: `{line}`", n + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "SEG" {
            return Err(bad("expected `SEG <class> <file-id> <onset> <duration>`"));
        }
        let class: Class = fields[1].parse().map_err(|_| bad("unknown class"))?;
        let on: f64 = fields[3].parse().map_err(|_| bad("bad onset"))?;
        let dur: f64 = fields[4].parse().map_err(|_| bad("bad duration"))?;
        if !(on >= 0.0 && dur > 0.0) {
            return Err(bad("onset must be ≥ 0 and duration > 0"));
        }
        files
            .entry(fields[2].to_string())
            .or_insert_with(empty_list)
            .classes[class.index()]
            .push((on, on + dur));
    }
    for list in files.values_mut() {
        for intervals in &mut list.classes {
            intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
    }
    Ok(SegmentFile { files, available })
}

impl SegmentFile {
    /// Frame labels for one file id; unknown ids yield all-zero labels.
    pub fn labels(&self, file_id: &str, num_frames: usize, frame_step_s: f64) -> Result<LabeledSegments> {
        let empty = empty_list();
        let list = self.files.get(file_id).unwrap_or(&empty);
        LabeledSegments::new(
            segments_to_frames(list, num_frames, frame_step_s),
            self.available.clone(),
        )
    }

    /// Frames spanned by the latest offset over all files and classes.
    pub fn num_frames(&self, frame_step_s: f64) -> usize {
        let end = self
            .files
            .values()
            .flat_map(|l| l.classes.iter().flatten())
            .map(|&(_, off)| off)
            .fold(0.0, f64::max);
        (end / frame_step_s).round() as usize
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|f| format!("{:.1}", 100.0 * f)).unwrap_or_else(|| "-".into())
}

/// Text table with one row per system and F1 (%) per class.
pub fn format_table(rows: &[(String, F1Report)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<width$}", "System");
    for c in Class::ALL {
        let _ = write!(out, " {:>6}", c.name());
    }
    out.push('\n');
    for (name, report) in rows {
        let _ = write!(out, "{name:<width$}");
        for c in Class::ALL {
            let _ = write!(out, " {:>6}", cell(report.f1(c)));
        }
        out.push('\n');
    }
    out
}

/// CSV with per-class precision, recall, F1 and support.
pub fn write_report_csv<W: Write>(mut w: W, rows: &[(String, F1Report)]) -> Result<()> {
    writeln!(w, "system,class,precision,recall,f1,support")?;
    for (name, report) in rows {
        for c in Class::ALL {
            if let Some(k) = report.get(c) {
                writeln!(
                    w,
                    "{name},{c},{},{},{},{}",
                    k.precision(),
                    k.recall(),
                    k.f1(),
                    k.support()
                )?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(bits: &str) -> Tensor {
        let data: Vec<f64> = bits.chars().map(|c| if c == '1' { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![1, data.len()], data).unwrap()
    }

    fn labeled(t: Tensor) -> LabeledSegments {
        LabeledSegments::fully_labeled(t).unwrap()
    }

    #[test]
    fn binarize_is_strict() {
        let p = Tensor::new(vec![1, 4], vec![0.5, 0.51, 1.0, 0.0]).unwrap();
        assert_eq!(binarize(&p, 0.5).data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(binarize(&p, 0.0).data(), &[1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn f1_examples() {
        let y = row("11110000");
        let same = frame_f1(&y, &labeled(y.clone())).unwrap();
        assert_eq!(same.classes[0].unwrap().f1(), 1.0);
        let inv = frame_f1(&row("00001111"), &labeled(y.clone())).unwrap();
        assert_eq!(inv.classes[0].unwrap().f1(), 0.0);
        let half = frame_f1(&row("11000000"), &labeled(y)).unwrap().classes[0].unwrap();
        assert_eq!(half.precision(), 1.0);
        assert_eq!(half.recall(), 0.5);
        assert!((half.f1() - 2.0 / 3.0).abs() < 1e-15);
        assert!(frame_f1(&Tensor::zeros(&[1, 0]), &labeled(Tensor::zeros(&[1, 0]))).is_err());
    }

    #[test]
    fn run_length_example() {
        let s = frames_to_segments(&row("0001110"), 0.02, 0.0).unwrap();
        assert_eq!(s.classes[0].len(), 1);
        let (on, off) = s.classes[0][0];
        assert!((on - 0.06).abs() < 1e-12 && (off - 0.12).abs() < 1e-12);
        assert!(frames_to_segments(&row("0000"), 0.02, 0.0).unwrap().classes[0].is_empty());
        assert!(frames_to_segments(&row("01"), 0.02, -1.0).is_err());
        let short = frames_to_segments(&row("0110111110"), 0.02, 0.05).unwrap();
        assert_eq!(short.classes[0].len(), 1);
    }

    #[test]
    fn segment_text_round_trip() {
        let b = Tensor::new(vec![4, 6], vec![
            1.0, 1.0, 0.0, 0.0, 1.0, 1.0, //
            0.0, 0.0, 0.0, 0.0, 0.0, 0.0, //
            0.0, 1.0, 1.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, 0.0, 1.0,
        ])
        .unwrap();
        let segs = frames_to_segments(&b, 0.02, 0.0).unwrap();
        let mut text = b"# classes: SAD,MD,ND\n".to_vec();
        write_segments(&mut text, "scene_00001", &segs).unwrap();
        let parsed = parse_segments(std::str::from_utf8(&text).unwrap()).unwrap();
        assert_eq!(parsed.available, vec![true, true, true, false]);
        let labels = parsed.labels("scene_00001", 6, 0.02).unwrap();
        assert_eq!(labels.labels, b);
        assert_eq!(parsed.num_frames(0.02), 6);
        assert!(parse_segments("SEG XYZ a 0 1").is_err());
        assert!(parse_segments("SEG SAD a 0").is_err());
    }

    #[test]
    fn median_removes_isolated_frames() {
        let f = median_filter(&row("0100111011"), 3).unwrap();
        assert_eq!(f.data(), row("0000111111").data());
        assert!(median_filter(&row("01"), 2).is_err());
    }

    #[test]
    fn table_layout() {
        let y = row("1100");
        let mut r = frame_f1(&y, &labeled(y.clone())).unwrap();
        r.classes.resize(4, None);
        let t = format_table(&[("Teacher".into(), r)]);
        assert!(t.starts_with("System     SAD     MD     ND    OSD\n"));
        assert!(t.contains("Teacher  100.0      -      -      -"));
    }
}
