//! Aggregation of dissection results into experiment-level curves.
//!
//! Two kinds of measurements are derived from [`DissectionReport`]s:
//!
//! * a per-network [`InterpretabilitySummary`] — how many units are
//!   interpretable, how many distinct concepts they cover, and how the
//!   interpretable units spread over concept categories;
//! * a [`ConsistencyReport`] between two dissections of the *same*
//!   architecture (typically dense baseline vs a pruned round) — how many of
//!   the originally interpretable units stayed interpretable, and how many
//!   of those kept the same best concept. Units are matched by identity
//!   `(layer, channel)`, never by position.
//!
//! [`emit_curves`] renders a whole experiment's rounds to two CSV files and
//! four self-contained SVG figures, all byte-deterministic: floats are
//! written in Rust's shortest round-trip form and read back bit-exactly.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::dissector::{DissectionReport, UnitDissection};
use crate::util::write_atomic;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("reports cover different unit sets: {0}")]
    UnitMismatch(String),
    #[error("invalid metrics input: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// How interpretable one network is, in aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretabilitySummary {
    pub total_units: usize,
    pub interpretable_units: usize,
    /// Distinct best concepts over the interpretable units.
    pub unique_concepts: usize,
    /// Interpretable units per best-concept category.
    pub per_category: BTreeMap<String, usize>,
}

/// Summarize one dissection report.
pub fn summarize(report: &DissectionReport) -> InterpretabilitySummary {
    let mut concepts = BTreeSet::new();
    let mut per_category: BTreeMap<String, usize> = BTreeMap::new();
    let mut interpretable = 0usize;
    for unit in report.interpretable_units() {
        interpretable += 1;
        concepts.insert(unit.best_concept);
        *per_category.entry(unit.best_category.clone()).or_default() += 1;
    }
    InterpretabilitySummary {
        total_units: report.units.len(),
        interpretable_units: interpretable,
        unique_concepts: concepts.len(),
        per_category,
    }
}

/// How a pruned network's interpretable units relate to the original's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// Units interpretable in the original dissection.
    pub original_interpretable: usize,
    /// Of those, units still interpretable after pruning.
    pub still_interpretable: usize,
    /// Of those, units whose best concept is unchanged.
    pub same_concept: usize,
    /// `still / original`; 1 when the original had none.
    pub retained_fraction: f64,
    /// `same / still`; 1 when no unit stayed interpretable.
    pub same_concept_fraction: f64,
}

fn unit_map(report: &DissectionReport) -> BTreeMap<(&str, usize), &UnitDissection> {
    report
        .units
        .iter()
        .map(|u| ((u.layer.as_str(), u.channel), u))
        .collect()
}

/// Compare two dissections of the same unit set.
pub fn consistency(
    original: &DissectionReport,
    pruned: &DissectionReport,
) -> Result<ConsistencyReport, MetricsError> {
    let a = unit_map(original);
    let b = unit_map(pruned);
    if a.len() != original.units.len() || b.len() != pruned.units.len() {
        return Err(MetricsError::UnitMismatch(
            "a report lists the same unit twice".into(),
        ));
    }
    if a.keys().ne(b.keys()) {
        let only_a: Vec<_> = a.keys().filter(|k| !b.contains_key(*k)).take(3).collect();
        let only_b: Vec<_> = b.keys().filter(|k| !a.contains_key(*k)).take(3).collect();
        return Err(MetricsError::UnitMismatch(format!(
            "only in original: {only_a:?}; only in pruned: {only_b:?}"
        )));
    }

    let mut original_interpretable = 0usize;
    let mut still_interpretable = 0usize;
    let mut same_concept = 0usize;
    for (key, unit_a) in &a {
        if !unit_a.interpretable {
            continue;
        }
        original_interpretable += 1;
        let unit_b = b[key];
        if unit_b.interpretable {
            still_interpretable += 1;
            if unit_b.best_concept == unit_a.best_concept {
                same_concept += 1;
            }
        }
    }
    let retained_fraction = if original_interpretable == 0 {
        1.0
    } else {
        still_interpretable as f64 / original_interpretable as f64
    };
    let same_concept_fraction = if still_interpretable == 0 {
        1.0
    } else {
        same_concept as f64 / still_interpretable as f64
    };
    Ok(ConsistencyReport {
        original_interpretable,
        still_interpretable,
        same_concept,
        retained_fraction,
        same_concept_fraction,
    })
}

/// One pruning round's measurements, ready for the curve files.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: u32,
    /// Fraction of prunable weights surviving (1.0 for the dense baseline).
    pub fraction_remaining: f64,
    /// Validation accuracy of the (re)trained network.
    pub accuracy: f64,
    pub summary: InterpretabilitySummary,
    /// Consistency against the dense baseline; absent for round 0.
    pub consistency: Option<ConsistencyReport>,
}

/// Write `summary.csv`, `consistency.csv`, and four SVG figures into `dir`.
/// `categories` fixes the per-category column set and order.
pub fn emit_curves(
    rounds: &[RoundMetrics],
    categories: &[String],
    dir: &Path,
) -> Result<(), MetricsError> {
    if rounds.is_empty() {
        return Err(MetricsError::Invalid("no rounds to plot".into()));
    }
    for pair in rounds.windows(2) {
        if pair[1].round <= pair[0].round {
            return Err(MetricsError::Invalid(format!(
                "rounds out of order: {} then {}",
                pair[0].round, pair[1].round
            )));
        }
    }
    for r in rounds {
        if !(r.fraction_remaining > 0.0 && r.fraction_remaining <= 1.0) {
            return Err(MetricsError::Invalid(format!(
                "round {}: fraction_remaining {} outside (0, 1]",
                r.round, r.fraction_remaining
            )));
        }
    }
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| MetricsError::Io { path, source }
    };

    // summary.csv
    let mut text = String::from("fraction_remaining,round,accuracy,interpretable_units,unique_concepts");
    for cat in categories {
        text.push(',');
        text.push_str(cat);
    }
    text.push('\n');
    for r in rounds {
        text.push_str(&format!(
            "{},{},{},{},{}",
            r.fraction_remaining,
            r.round,
            r.accuracy,
            r.summary.interpretable_units,
            r.summary.unique_concepts
        ));
        for cat in categories {
            let count = r.summary.per_category.get(cat).copied().unwrap_or(0);
            text.push_str(&format!(",{count}"));
        }
        text.push('\n');
    }
    let path = dir.join("summary.csv");
    write_atomic(&path, text.as_bytes()).map_err(io(&path))?;

    // consistency.csv
    let mut text = String::from("fraction_remaining,round,retained_fraction,same_concept_fraction\n");
    for r in rounds {
        if let Some(c) = &r.consistency {
            text.push_str(&format!(
                "{},{},{},{}\n",
                r.fraction_remaining, r.round, c.retained_fraction, c.same_concept_fraction
            ));
        }
    }
    let path = dir.join("consistency.csv");
    write_atomic(&path, text.as_bytes()).map_err(io(&path))?;

    // Figures.
    let xs: Vec<f64> = rounds.iter().map(|r| r.fraction_remaining).collect();

    let fig = line_chart(
        "Accuracy under iterative pruning",
        "weights remaining",
        "validation accuracy",
        &xs,
        &[Series {
            name: "accuracy",
            color: PALETTE[0],
            ys: rounds.iter().map(|r| r.accuracy).collect(),
        }],
        1.0,
    );
    let path = dir.join("fig1_accuracy.svg");
    write_atomic(&path, fig.as_bytes()).map_err(io(&path))?;

    let counts: Vec<f64> = rounds
        .iter()
        .map(|r| r.summary.interpretable_units as f64)
        .collect();
    let uniques: Vec<f64> = rounds
        .iter()
        .map(|r| r.summary.unique_concepts as f64)
        .collect();
    let y_max = nice_ceiling(counts.iter().cloned().fold(0.0, f64::max));
    let fig = line_chart(
        "Interpretable units under iterative pruning",
        "weights remaining",
        "units",
        &xs,
        &[
            Series {
                name: "interpretable units",
                color: PALETTE[0],
                ys: counts,
            },
            Series {
                name: "unique concepts",
                color: PALETTE[1],
                ys: uniques,
            },
        ],
        y_max,
    );
    let path = dir.join("fig2_interpretability.svg");
    write_atomic(&path, fig.as_bytes()).map_err(io(&path))?;

    let per_cat: Vec<Vec<f64>> = categories
        .iter()
        .map(|cat| {
            rounds
                .iter()
                .map(|r| r.summary.per_category.get(cat).copied().unwrap_or(0) as f64)
                .collect()
        })
        .collect();
    let fig = stacked_area_chart(
        "Interpretable units by category",
        "weights remaining",
        "units",
        &xs,
        categories,
        &per_cat,
    );
    let path = dir.join("fig3_categories.svg");
    write_atomic(&path, fig.as_bytes()).map_err(io(&path))?;

    let cons: Vec<(f64, &ConsistencyReport)> = rounds
        .iter()
        .filter_map(|r| r.consistency.as_ref().map(|c| (r.fraction_remaining, c)))
        .collect();
    let cxs: Vec<f64> = cons.iter().map(|(f, _)| *f).collect();
    let fig = line_chart(
        "Unit consistency vs the dense baseline",
        "weights remaining",
        "fraction",
        &cxs,
        &[
            Series {
                name: "still interpretable",
                color: PALETTE[0],
                ys: cons.iter().map(|(_, c)| c.retained_fraction).collect(),
            },
            Series {
                name: "same concept",
                color: PALETTE[1],
                ys: cons.iter().map(|(_, c)| c.same_concept_fraction).collect(),
            },
        ],
        1.0,
    );
    let path = dir.join("fig4_consistency.svg");
    write_atomic(&path, fig.as_bytes()).map_err(io(&path))?;

    Ok(())
}

// ---------------------------------------------------------------------------
// SVG rendering
// ---------------------------------------------------------------------------

const PALETTE: [&str; 6] = [
    "#2c7fb8", "#d95f0e", "#31a354", "#756bb1", "#c51b8a", "#636363",
];
const W: f64 = 720.0;
const H: f64 = 440.0;
const ML: f64 = 72.0; // left margin
const MR: f64 = 24.0;
const MT: f64 = 46.0;
const MB: f64 = 58.0;

struct Series<'a> {
    name: &'a str,
    color: &'a str,
    ys: Vec<f64>,
}

/// Smallest 1/2/5 × 10^k at or above `v` (1.0 for empty/zero data).
fn nice_ceiling(v: f64) -> f64 {
    if !(v > 0.0) {
        return 1.0;
    }
    let exp = v.log10().floor();
    let base = 10f64.powf(exp);
    for m in [1.0, 2.0, 5.0, 10.0] {
        if m * base >= v {
            return m * base;
        }
    }
    10.0 * base
}

fn fmt_percent(fraction: f64) -> String {
    let pct = fraction * 100.0;
    if pct >= 9.95 {
        format!("{pct:.0}%")
    } else if pct >= 0.995 {
        format!("{pct:.1}%")
    } else {
        format!("{pct:.2}%")
    }
}

fn fmt_tick(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e6 {
        format!("{}", v as i64)
    } else {
        format!("{v:.2}")
    }
}

/// X pixel positions: log scale on the surviving fraction, largest fraction
/// at the left. Degenerate spans center their single position.
fn x_positions(fractions: &[f64]) -> Vec<f64> {
    let plot_w = W - ML - MR;
    let hi = fractions.iter().cloned().fold(f64::MIN, f64::max);
    let lo = fractions.iter().cloned().fold(f64::MAX, f64::min);
    if fractions.is_empty() || lo == hi {
        return fractions.iter().map(|_| ML + plot_w / 2.0).collect();
    }
    let (lhi, llo) = (hi.ln(), lo.ln());
    fractions
        .iter()
        .map(|&f| ML + (lhi - f.ln()) / (lhi - llo) * plot_w)
        .collect()
}

fn y_position(v: f64, y_max: f64) -> f64 {
    let plot_h = H - MT - MB;
    MT + (1.0 - v / y_max) * plot_h
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn chart_frame(title: &str, x_label: &str, y_label: &str, y_max: f64) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\">\n"
    ));
    s.push_str(&format!(
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        esc(title)
    ));
    // Axes.
    let (x0, y0, x1, y1) = (ML, H - MB, W - MR, MT);
    s.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"#333\"/>\n"
    ));
    s.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"#333\"/>\n"
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\">{}</text>\n",
        (x0 + x1) / 2.0,
        H - 14.0,
        esc(x_label)
    ));
    s.push_str(&format!(
        "<text x=\"18\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" \
         transform=\"rotate(-90 18 {})\">{}</text>\n",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        esc(y_label)
    ));
    // Horizontal grid with y tick labels.
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = y_position(v, y_max);
        s.push_str(&format!(
            "<line x1=\"{x0}\" y1=\"{y}\" x2=\"{x1}\" y2=\"{y}\" stroke=\"#ddd\" stroke-dasharray=\"3 3\"/>\n"
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            x0 - 7.0,
            y + 4.0,
            fmt_tick(v)
        ));
    }
    s
}

fn x_ticks(s: &mut String, xs_px: &[f64], fractions: &[f64]) {
    let y0 = H - MB;
    let step = fractions.len().div_ceil(8).max(1);
    for (i, (&x, &f)) in xs_px.iter().zip(fractions).enumerate() {
        let labeled = i % step == 0 || i + 1 == fractions.len();
        s.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{y0}\" x2=\"{x}\" y2=\"{}\" stroke=\"#333\"/>\n",
            y0 + 4.0
        ));
        if labeled {
            s.push_str(&format!(
                "<text x=\"{x}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
                y0 + 18.0,
                fmt_percent(f)
            ));
        }
    }
}

fn legend(s: &mut String, entries: &[(&str, &str)]) {
    let x = ML + 12.0;
    for (i, (name, color)) in entries.iter().enumerate() {
        let y = MT + 10.0 + i as f64 * 18.0;
        s.push_str(&format!(
            "<rect x=\"{x}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n",
            y - 10.0
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{y}\" font-size=\"12\">{}</text>\n",
            x + 18.0,
            esc(name)
        ));
    }
}

fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    fractions: &[f64],
    series: &[Series<'_>],
    y_max: f64,
) -> String {
    let mut s = chart_frame(title, x_label, y_label, y_max);
    let xs_px = x_positions(fractions);
    x_ticks(&mut s, &xs_px, fractions);
    for sr in series {
        let pts: Vec<String> = xs_px
            .iter()
            .zip(&sr.ys)
            .map(|(&x, &v)| format!("{:.2},{:.2}", x, y_position(v, y_max)))
            .collect();
        if pts.len() > 1 {
            s.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>\n",
                pts.join(" "),
                sr.color
            ));
        }
        for p in &pts {
            let (x, y) = p.split_once(',').expect("formatted above");
            s.push_str(&format!(
                "<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"{}\"/>\n",
                sr.color
            ));
        }
    }
    legend(
        &mut s,
        &series
            .iter()
            .map(|sr| (sr.name, sr.color))
            .collect::<Vec<_>>(),
    );
    s.push_str("</svg>\n");
    s
}

fn stacked_area_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    fractions: &[f64],
    names: &[String],
    layers: &[Vec<f64>],
) -> String {
    let n = fractions.len();
    let totals: Vec<f64> = (0..n)
        .map(|i| layers.iter().map(|l| l[i]).sum::<f64>())
        .collect();
    let y_max = nice_ceiling(totals.iter().cloned().fold(0.0, f64::max));
    let mut s = chart_frame(title, x_label, y_label, y_max);
    let xs_px = x_positions(fractions);
    x_ticks(&mut s, &xs_px, fractions);

    let mut cum_lo = vec![0.0f64; n];
    for (li, layer) in layers.iter().enumerate() {
        let cum_hi: Vec<f64> = cum_lo.iter().zip(layer).map(|(a, b)| a + b).collect();
        if n > 1 {
            let mut d = String::new();
            for (i, &x) in xs_px.iter().enumerate() {
                let cmd = if i == 0 { 'M' } else { 'L' };
                d.push_str(&format!(
                    "{cmd}{:.2},{:.2} ",
                    x,
                    y_position(cum_hi[i], y_max)
                ));
            }
            for (i, &x) in xs_px.iter().enumerate().rev() {
                d.push_str(&format!("L{:.2},{:.2} ", x, y_position(cum_lo[i], y_max)));
            }
            d.push('Z');
            s.push_str(&format!(
                "<path d=\"{d}\" fill=\"{}\" fill-opacity=\"0.75\" stroke=\"{}\" stroke-width=\"1\"/>\n",
                PALETTE[li % PALETTE.len()],
                PALETTE[li % PALETTE.len()]
            ));
        } else if n == 1 {
            s.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\"/>\n",
                xs_px[0],
                y_position(cum_hi[0], y_max),
                PALETTE[li % PALETTE.len()]
            ));
        }
        cum_lo = cum_hi;
    }
    legend(
        &mut s,
        &names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), PALETTE[i % PALETTE.len()]))
            .collect::<Vec<_>>(),
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Assemble a report from `(layer, channel, best_concept, iou)` rows
    /// with the standard 0.05 interpretability bar.
    fn report(rows: &[(&str, usize, u16, f64)]) -> DissectionReport {
        let units = rows
            .iter()
            .map(|&(layer, channel, concept, iou)| UnitDissection {
                layer: layer.into(),
                channel,
                threshold: 1.0,
                best_concept: concept,
                best_concept_name: format!("concept{concept}"),
                best_category: match concept % 3 {
                    0 => "color".into(),
                    1 => "object".into(),
                    _ => "texture".into(),
                },
                best_iou: iou,
                interpretable: iou > 0.05,
            })
            .collect();
        DissectionReport {
            format_version: 1,
            quantile: 0.995,
            iou_threshold: 0.05,
            layers: vec!["stage1.block0".into()],
            model_hash: "m".into(),
            dataset_hash: "d".into(),
            mask_hash: None,
            units,
        }
    }

    #[test]
    fn summarize_counts_interpretable_units_and_concepts() {
        // Six units: four interpretable, concepts {1, 1, 2, 3} → 3 unique.
        let r = report(&[
            ("a", 0, 1, 0.30),
            ("a", 1, 1, 0.20),
            ("a", 2, 2, 0.10),
            ("a", 3, 3, 0.06),
            ("a", 4, 4, 0.05), // exactly at the bar: NOT interpretable
            ("a", 5, 5, 0.01),
        ]);
        let s = summarize(&r);
        assert_eq!(s.total_units, 6);
        assert_eq!(s.interpretable_units, 4);
        assert_eq!(s.unique_concepts, 3);
        // concept 1 → object (x2), 2 → texture, 3 → color.
        assert_eq!(s.per_category.get("object"), Some(&2));
        assert_eq!(s.per_category.get("texture"), Some(&1));
        assert_eq!(s.per_category.get("color"), Some(&1));
    }

    #[test]
    fn consistency_of_a_report_with_itself_is_perfect() {
        let r = report(&[("a", 0, 1, 0.3), ("a", 1, 2, 0.2), ("a", 2, 3, 0.01)]);
        let c = consistency(&r, &r).unwrap();
        assert_eq!(c.original_interpretable, 2);
        assert_eq!(c.still_interpretable, 2);
        assert_eq!(c.same_concept, 2);
        assert_eq!(c.retained_fraction, 1.0);
        assert_eq!(c.same_concept_fraction, 1.0);
    }

    #[test]
    fn consistency_counts_follow_the_hand_worked_fixture() {
        // Original: units 0..=3 interpretable (concepts 1,2,3,4); 4,5 not.
        let orig = report(&[
            ("a", 0, 1, 0.30),
            ("a", 1, 2, 0.25),
            ("a", 2, 3, 0.20),
            ("a", 3, 4, 0.15),
            ("a", 4, 5, 0.01),
            ("a", 5, 6, 0.02),
        ]);
        // Pruned: unit 0 drops out; 1 keeps concept 2; 2 flips to concept 7;
        // 3 keeps concept 4; 4 becomes interpretable (doesn't count).
        let pruned = report(&[
            ("a", 0, 1, 0.01),
            ("a", 1, 2, 0.30),
            ("a", 2, 7, 0.21),
            ("a", 3, 4, 0.08),
            ("a", 4, 5, 0.40),
            ("a", 5, 6, 0.01),
        ]);
        let c = consistency(&orig, &pruned).unwrap();
        assert_eq!(c.original_interpretable, 4);
        assert_eq!(c.still_interpretable, 3, "units 1, 2, 3");
        assert_eq!(c.same_concept, 2, "units 1 and 3");
        assert_eq!(c.retained_fraction, 0.75);
        assert_eq!(c.same_concept_fraction, 2.0 / 3.0);
    }

    #[test]
    fn empty_denominators_default_to_one() {
        // Nothing interpretable originally.
        let orig = report(&[("a", 0, 1, 0.01), ("a", 1, 2, 0.02)]);
        let pruned = report(&[("a", 0, 1, 0.30), ("a", 1, 2, 0.02)]);
        let c = consistency(&orig, &pruned).unwrap();
        assert_eq!(c.retained_fraction, 1.0);
        assert_eq!(c.same_concept_fraction, 1.0);

        // Interpretable originally, nothing retained.
        let orig = report(&[("a", 0, 1, 0.30)]);
        let pruned = report(&[("a", 0, 1, 0.01)]);
        let c = consistency(&orig, &pruned).unwrap();
        assert_eq!(c.retained_fraction, 0.0);
        assert_eq!(c.same_concept_fraction, 1.0, "0/0 convention");
    }

    #[test]
    fn units_are_matched_by_identity_not_position() {
        let orig = report(&[("a", 0, 1, 0.30), ("b", 0, 2, 0.30)]);
        // Same units, opposite order, one concept flipped.
        let shuffled = report(&[("b", 0, 9, 0.30), ("a", 0, 1, 0.30)]);
        let c = consistency(&orig, &shuffled).unwrap();
        assert_eq!(c.still_interpretable, 2);
        assert_eq!(c.same_concept, 1, "only (a, 0) kept its concept");
    }

    #[test]
    fn mismatched_unit_sets_are_rejected() {
        let orig = report(&[("a", 0, 1, 0.30)]);
        let other = report(&[("a", 1, 1, 0.30)]);
        assert!(matches!(
            consistency(&orig, &other),
            Err(MetricsError::UnitMismatch(_))
        ));
        let fewer = report(&[("a", 0, 1, 0.30), ("a", 1, 1, 0.2)]);
        assert!(consistency(&orig, &fewer).is_err());
    }

    fn sample_rounds() -> Vec<RoundMetrics> {
        let mk_summary = |interp: usize, unique: usize, color: usize, object: usize| {
            let mut per_category = BTreeMap::new();
            if color > 0 {
                per_category.insert("color".to_string(), color);
            }
            if object > 0 {
                per_category.insert("object".to_string(), object);
            }
            InterpretabilitySummary {
                total_units: 32,
                interpretable_units: interp,
                unique_concepts: unique,
                per_category,
            }
        };
        vec![
            RoundMetrics {
                round: 0,
                fraction_remaining: 1.0,
                accuracy: 0.92,
                summary: mk_summary(20, 7, 12, 8),
                consistency: None,
            },
            RoundMetrics {
                round: 1,
                fraction_remaining: 0.8,
                accuracy: 0.915,
                summary: mk_summary(18, 7, 11, 7),
                consistency: Some(ConsistencyReport {
                    original_interpretable: 20,
                    still_interpretable: 17,
                    same_concept: 15,
                    retained_fraction: 0.85,
                    same_concept_fraction: 15.0 / 17.0,
                }),
            },
            RoundMetrics {
                round: 2,
                fraction_remaining: 0.64,
                accuracy: 0.90,
                summary: mk_summary(15, 6, 9, 6),
                consistency: Some(ConsistencyReport {
                    original_interpretable: 20,
                    still_interpretable: 13,
                    same_concept: 10,
                    retained_fraction: 0.65,
                    same_concept_fraction: 10.0 / 13.0,
                }),
            },
        ]
    }

    #[test]
    fn curve_files_have_exact_headers_and_round_trip_floats() {
        let dir = tempfile::tempdir().unwrap();
        let cats = vec!["color".to_string(), "object".to_string(), "texture".to_string()];
        let rounds = sample_rounds();
        emit_curves(&rounds, &cats, dir.path()).unwrap();

        let text = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "fraction_remaining,round,accuracy,interpretable_units,unique_concepts,color,object,texture"
        );
        for (line, r) in lines.zip(&rounds) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 8);
            // Shortest-form floats parse back to the exact source bits.
            assert_eq!(
                cols[0].parse::<f64>().unwrap().to_bits(),
                r.fraction_remaining.to_bits()
            );
            assert_eq!(cols[1].parse::<u32>().unwrap(), r.round);
            assert_eq!(cols[2].parse::<f64>().unwrap().to_bits(), r.accuracy.to_bits());
            assert_eq!(
                cols[3].parse::<usize>().unwrap(),
                r.summary.interpretable_units
            );
            assert_eq!(cols[7], "0", "absent category column is zero-filled");
        }

        let text = std::fs::read_to_string(dir.path().join("consistency.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "fraction_remaining,round,retained_fraction,same_concept_fraction"
        );
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 2, "round 0 has no consistency row");
        let cols: Vec<&str> = rows[1].split(',').collect();
        let expect = rounds[2].consistency.as_ref().unwrap();
        assert_eq!(
            cols[2].parse::<f64>().unwrap().to_bits(),
            expect.retained_fraction.to_bits()
        );
        assert_eq!(
            cols[3].parse::<f64>().unwrap().to_bits(),
            expect.same_concept_fraction.to_bits()
        );
    }

    #[test]
    fn figures_are_valid_svg_and_deterministic() {
        let cats = vec!["color".to_string(), "object".to_string()];
        let rounds = sample_rounds();
        let emit = || {
            let dir = tempfile::tempdir().unwrap();
            emit_curves(&rounds, &cats, dir.path()).unwrap();
            let mut out = Vec::new();
            for name in [
                "fig1_accuracy.svg",
                "fig2_interpretability.svg",
                "fig3_categories.svg",
                "fig4_consistency.svg",
            ] {
                out.push(std::fs::read_to_string(dir.path().join(name)).unwrap());
            }
            out
        };
        let a = emit();
        let b = emit();
        assert_eq!(a, b, "figures must be byte-deterministic");
        for svg in &a {
            assert!(svg.starts_with("<svg "));
            assert!(svg.trim_end().ends_with("</svg>"));
        }
        assert!(a[0].contains("polyline"), "accuracy line plot");
        assert!(a[2].contains("<path"), "stacked areas");
        assert!(a[3].contains("same concept"), "legend entries");
    }

    #[test]
    fn emit_rejects_bad_round_sequences() {
        let cats = vec!["color".to_string()];
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_curves(&[], &cats, dir.path()),
            Err(MetricsError::Invalid(_))
        ));
        let mut rounds = sample_rounds();
        rounds[1].round = 0;
        assert!(emit_curves(&rounds, &cats, dir.path()).is_err());
        let mut rounds = sample_rounds();
        rounds[2].fraction_remaining = 0.0;
        assert!(emit_curves(&rounds, &cats, dir.path()).is_err());
    }

    #[test]
    fn nice_ceiling_picks_round_bounds() {
        assert_eq!(nice_ceiling(0.0), 1.0);
        assert_eq!(nice_ceiling(3.0), 5.0);
        assert_eq!(nice_ceiling(5.0), 5.0);
        assert_eq!(nice_ceiling(7.0), 10.0);
        assert_eq!(nice_ceiling(23.0), 50.0);
        assert_eq!(nice_ceiling(0.7), 1.0);
    }
}
