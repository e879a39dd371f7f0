//! Detection scoring: greedy matching under IoU or IoBB, FROC curves,
//! sensitivity at fixed FP rates, and stratified breakdowns by lesion
//! type, diameter, and source slice interval.

use crate::ct::AnnotationRow;
use crate::det::{iobb, iou, BBox};
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// (volume_id, key_slice) identifies one evaluated image.
pub type ImageKey = (String, usize);

/// Ground-truth box with report metadata.
#[derive(Clone, Debug)]
pub struct GtEntry {
    pub bbox: BBox,
    pub lesion_type: u8,
    pub diameter_mm: f32,
    pub interval_mm: Option<f32>,
}

/// Ground truth for a test set. Every image id is present even when it has
/// zero boxes, so FP-per-image denominators are well defined.
#[derive(Clone, Debug, Default)]
pub struct GroundTruthSet {
    pub images: BTreeMap<ImageKey, Vec<GtEntry>>,
}

impl GroundTruthSet {
    pub fn from_rows(rows: &[AnnotationRow]) -> Self {
        let mut images: BTreeMap<ImageKey, Vec<GtEntry>> = BTreeMap::new();
        for row in rows {
            let key = (row.volume_id.clone(), row.key_slice);
            let entry = images.entry(key).or_default();
            if let Some(b) = &row.entry {
                entry.push(GtEntry {
                    bbox: b.bbox,
                    lesion_type: b.lesion_type,
                    diameter_mm: b.diameter_mm,
                    interval_mm: b.interval_mm,
                });
            }
        }
        GroundTruthSet { images }
    }

    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    pub fn n_boxes(&self) -> usize {
        self.images.values().map(Vec::len).sum()
    }
}

/// One detection row of the exchange CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct DetRecord {
    pub volume_id: String,
    pub key_slice: usize,
    pub bbox: BBox,
    pub score: f32,
}

impl DetRecord {
    pub fn image_key(&self) -> ImageKey {
        (self.volume_id.clone(), self.key_slice)
    }
}

/// Overlap criterion used for matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Criterion {
    Iou,
    Iobb,
}

impl Criterion {
    pub fn overlap(&self, gt: &BBox, det: &BBox) -> f32 {
        match self {
            Criterion::Iou => iou(gt, det),
            Criterion::Iobb => iobb(gt, det),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iou" => Ok(Criterion::Iou),
            "iobb" => Ok(Criterion::Iobb),
            other => Err(Error::invalid("criterion", format!("expected iou or iobb, got {other:?}"))),
        }
    }
}

/// Outcome of greedy matching: per-detection TP flags in input order and,
/// per ground-truth box, the score of the detection that matched it.
#[derive(Clone, Debug)]
pub struct MatchOutcome {
    pub det_is_tp: Vec<bool>,
    pub gt_match_score: BTreeMap<ImageKey, Vec<Option<f32>>>,
}

/// Greedy matching by descending score (ties keep input order): a
/// detection is a TP if its best-overlap unmatched gt in the same image
/// has overlap strictly above `threshold`; that gt then counts as matched.
pub fn match_detections(
    dets: &[DetRecord],
    gts: &GroundTruthSet,
    criterion: Criterion,
    threshold: f32,
) -> Result<MatchOutcome> {
    let mut det_is_tp = vec![false; dets.len()];
    let mut gt_match_score: BTreeMap<ImageKey, Vec<Option<f32>>> = gts
        .images
        .iter()
        .map(|(k, v)| (k.clone(), vec![None; v.len()]))
        .collect();

    let mut by_image: BTreeMap<ImageKey, Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        let key = d.image_key();
        if !gts.images.contains_key(&key) {
            return Err(Error::invalid(
                "match_detections",
                format!("detection references image {key:?} absent from ground truth"),
            ));
        }
        by_image.entry(key).or_default().push(i);
    }

    for (key, mut idx) in by_image {
        idx.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).expect("finite scores"));
        let boxes = &gts.images[&key];
        let matched = gt_match_score.get_mut(&key).expect("image present");
        for &di in &idx {
            let mut best: Option<(usize, f32)> = None;
            for (gi, gt) in boxes.iter().enumerate() {
                if matched[gi].is_some() {
                    continue;
                }
                let v = criterion.overlap(&gt.bbox, &dets[di].bbox);
                if best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, v)) = best {
                if v > threshold {
                    det_is_tp[di] = true;
                    matched[gi] = Some(dets[di].score);
                }
            }
        }
    }
    Ok(MatchOutcome { det_is_tp, gt_match_score })
}

pub const STANDARD_FP_RATES: [f64; 6] = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0];

/// One operating point per distinct score cutoff.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrocPoint {
    pub score_cutoff: f32,
    pub fp_per_image: f64,
    pub sensitivity: f64,
}

/// The (false-positives-per-image, sensitivity) step function.
#[derive(Clone, Debug)]
pub struct FrocCurve {
    pub points: Vec<FrocPoint>,
    pub n_images: usize,
    pub n_gts: usize,
}

impl FrocCurve {
    /// Maximum sensitivity among operating points with fp_per_image <= rate
    /// (step function, no interpolation); 0 if none qualify.
    pub fn sensitivity_at(&self, fp_rate: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.fp_per_image <= fp_rate)
            .map(|p| p.sensitivity)
            .fold(0.0, f64::max)
    }

    /// The operating point realizing `sensitivity_at(fp_rate)`: the highest
    /// cutoff that attains the maximum sensitivity within the FP budget.
    pub fn operating_point(&self, fp_rate: f64) -> Option<FrocPoint> {
        let best = self.sensitivity_at(fp_rate);
        self.points
            .iter()
            .find(|p| p.fp_per_image <= fp_rate && p.sensitivity == best)
            .copied()
    }

    /// Sensitivities at the six standard FP rates.
    pub fn sensitivity_table(&self) -> [f64; 6] {
        let mut out = [0.0; 6];
        for (o, r) in out.iter_mut().zip(STANDARD_FP_RATES) {
            *o = self.sensitivity_at(r);
        }
        out
    }
}

/// Sweep score cutoffs at every distinct detection score: at each cutoff
/// sensitivity = matched gts / total gts and fp_per_image = FPs / images.
pub fn froc_curve(dets: &[DetRecord], gts: &GroundTruthSet, criterion: Criterion, threshold: f32) -> Result<FrocCurve> {
    let n_gts = gts.n_boxes();
    if n_gts == 0 {
        return Err(Error::invalid("froc_curve", "ground truth contains zero boxes"));
    }
    let n_images = gts.n_images();
    let outcome = match_detections(dets, gts, criterion, threshold)?;

    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).expect("finite scores"));

    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0usize;
    while i < order.len() {
        let cutoff = dets[order[i]].score;
        while i < order.len() && dets[order[i]].score == cutoff {
            if outcome.det_is_tp[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(FrocPoint {
            score_cutoff: cutoff,
            fp_per_image: fp as f64 / n_images as f64,
            sensitivity: tp as f64 / n_gts as f64,
        });
    }
    Ok(FrocCurve { points, n_images, n_gts })
}

const TYPE_NAMES: [&str; 8] = ["LU", "ME", "LV", "ST", "PV", "AB", "KD", "BN"];
const DIAMETER_NAMES: [&str; 3] = ["<10", "10~30", ">30"];
const INTERVAL_NAMES: [&str; 2] = ["<2.5", ">2.5"];

/// Per-stratum sensitivity at a fixed global operating point.
#[derive(Clone, Debug, PartialEq)]
pub struct StratumRow {
    pub name: String,
    pub total: usize,
    pub matched: usize,
}

impl StratumRow {
    pub fn sensitivity(&self) -> f64 {
        self.matched as f64 / self.total as f64
    }
}

/// Stratified sensitivities; empty strata are absent, not zero.
#[derive(Clone, Debug, Default)]
pub struct StratifiedReport {
    pub fp_rate: f64,
    pub score_cutoff: Option<f32>,
    pub by_type: Vec<StratumRow>,
    pub by_diameter: Vec<StratumRow>,
    pub by_interval: Vec<StratumRow>,
}

fn diameter_bucket(d: f32) -> usize {
    if d < 10.0 {
        0
    } else if d <= 30.0 {
        1
    } else {
        2
    }
}

/// The score cutoff is fixed globally at the operating point for `fp_rate`;
/// per-stratum sensitivity is then computed over that stratum's gts. FPs
/// are not stratified — they only set the global cutoff.
pub fn stratified_report(
    dets: &[DetRecord],
    gts: &GroundTruthSet,
    criterion: Criterion,
    threshold: f32,
    fp_rate: f64,
) -> Result<StratifiedReport> {
    let curve = froc_curve(dets, gts, criterion, threshold)?;
    let op = curve.operating_point(fp_rate);
    let outcome = match_detections(dets, gts, criterion, threshold)?;

    let counted = |score: Option<f32>| -> bool {
        match (score, op) {
            (Some(s), Some(p)) => s >= p.score_cutoff,
            _ => false,
        }
    };

    let mut type_counts = vec![(0usize, 0usize); 8];
    let mut diam_counts = vec![(0usize, 0usize); 3];
    let mut intv_counts = vec![(0usize, 0usize); 2];
    for (key, entries) in &gts.images {
        let match_scores = &outcome.gt_match_score[key];
        for (gi, e) in entries.iter().enumerate() {
            let hit = counted(match_scores[gi]);
            let t = &mut type_counts[e.lesion_type as usize];
            t.0 += 1;
            t.1 += usize::from(hit);
            let d = &mut diam_counts[diameter_bucket(e.diameter_mm)];
            d.0 += 1;
            d.1 += usize::from(hit);
            if let Some(iv) = e.interval_mm {
                let b = &mut intv_counts[usize::from(iv >= 2.5)];
                b.0 += 1;
                b.1 += usize::from(hit);
            }
        }
    }
    let rows = |counts: &[(usize, usize)], names: &[&str]| -> Vec<StratumRow> {
        counts
            .iter()
            .zip(names)
            .filter(|((total, _), _)| *total > 0)
            .map(|((total, matched), name)| StratumRow { name: name.to_string(), total: *total, matched: *matched })
            .collect()
    };
    Ok(StratifiedReport {
        fp_rate,
        score_cutoff: op.map(|p| p.score_cutoff),
        by_type: rows(&type_counts, &TYPE_NAMES),
        by_diameter: rows(&diam_counts, &DIAMETER_NAMES),
        by_interval: rows(&intv_counts, &INTERVAL_NAMES),
    })
}

// ── report rendering ────────────────────────────────────────────────

/// Two tab-separated lines: the FP-rate header and sensitivities as
/// percents with 2 decimals.
pub fn render_sensitivity_table(values: &[f64; 6]) -> String {
    let header = STANDARD_FP_RATES
        .iter()
        .map(|r| if r.fract() == 0.0 { format!("{r:.0}") } else { format!("{r}") })
        .collect::<Vec<_>>()
        .join("\t");
    let row = values.iter().map(|v| format!("{:.2}", v * 100.0)).collect::<Vec<_>>().join("\t");
    format!("FPs per image\t{header}\nsensitivity\t{row}\n")
}

/// Three header/value line pairs mirroring the type / diameter / interval
/// breakdown scheme.
pub fn render_stratified_report(report: &StratifiedReport) -> String {
    let mut out = String::new();
    let section = |out: &mut String, title: &str, rows: &[StratumRow]| {
        if rows.is_empty() {
            return;
        }
        out.push_str(title);
        for r in rows {
            out.push('\t');
            out.push_str(&r.name);
        }
        out.push('\n');
        out.push_str("sensitivity");
        for r in rows {
            out.push_str(&format!("\t{:.2}", r.sensitivity() * 100.0));
        }
        out.push('\n');
    };
    out.push_str(&format!("sensitivity at {} FPs per image\n", report.fp_rate));
    section(&mut out, "Lesion type", &report.by_type);
    section(&mut out, "Lesion diameter (mm)", &report.by_diameter);
    section(&mut out, "Slice interval (mm)", &report.by_interval);
    out
}

// ── detection CSV exchange format ───────────────────────────────────

pub const DETECTION_HEADER: [&str; 7] = ["volume_id", "key_slice", "x1", "y1", "x2", "y2", "score"];

/// Write detections sorted by score descending per image; images appear in
/// (volume_id, key_slice) order.
pub fn write_detections(path: &Path, dets: &[DetRecord]) -> Result<()> {
    let show = path.display().to_string();
    let mut grouped: BTreeMap<ImageKey, Vec<&DetRecord>> = BTreeMap::new();
    for d in dets {
        grouped.entry(d.image_key()).or_default().push(d);
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format { path: show.clone(), detail: e.to_string() })?;
    let werr = |e: csv::Error| Error::Format { path: show.clone(), detail: e.to_string() };
    w.write_record(DETECTION_HEADER).map_err(werr)?;
    for (_, mut rows) in grouped {
        rows.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
        for d in rows {
            w.write_record([
                d.volume_id.as_str(),
                &d.key_slice.to_string(),
                &d.bbox.x1.to_string(),
                &d.bbox.y1.to_string(),
                &d.bbox.x2.to_string(),
                &d.bbox.y2.to_string(),
                &d.score.to_string(),
            ])
            .map_err(werr)?;
        }
    }
    w.flush().map_err(|e| Error::io(&show, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<DetRecord>> {
    let show = path.display().to_string();
    let fmt = |detail: String| Error::Format { path: show.clone(), detail };
    let mut r = csv::Reader::from_path(path).map_err(|e| fmt(e.to_string()))?;
    {
        let headers = r.headers().map_err(|e| fmt(e.to_string()))?;
        if headers.len() != 7 || &headers[0] != "volume_id" {
            return Err(fmt(format!("unexpected header {headers:?}")));
        }
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| fmt(e.to_string()))?;
        let get = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let parse_f = |i: usize, name: &str| -> Result<f32> {
            get(i).parse().map_err(|_| fmt(format!("row {}: bad {name} {:?}", line + 2, get(i))))
        };
        let key_slice: usize = get(1).parse().map_err(|_| fmt(format!("row {}: bad key_slice", line + 2)))?;
        let score = parse_f(6, "score")?;
        if !score.is_finite() {
            return Err(fmt(format!("row {}: non-finite score", line + 2)));
        }
        out.push(DetRecord {
            volume_id: get(0),
            key_slice,
            bbox: BBox::new(parse_f(2, "x1")?, parse_f(3, "y1")?, parse_f(4, "x2")?, parse_f(5, "y2")?),
            score,
        });
    }
    Ok(out)
}

/// FROC curve as CSV `(fp_per_image, sensitivity)` for external plotting.
pub fn write_froc_csv(path: &Path, curve: &FrocCurve) -> Result<()> {
    let show = path.display().to_string();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(&show, e))?;
    writeln!(f, "fp_per_image,sensitivity").map_err(|e| Error::io(&show, e))?;
    for p in &curve.points {
        writeln!(f, "{},{}", p.fp_per_image, p.sensitivity).map_err(|e| Error::io(&show, e))?;
    }
    Ok(())
}
