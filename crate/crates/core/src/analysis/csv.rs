//! CSV tables with fixed headers. Floats carry 9 significant digits.

use crate::analysis::{CosineStats, EmbeddedPoint, SweepRow};

pub fn fmt_float(x: f64) -> String {
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x.is_nan() {
        return "nan".into();
    }
    format!("{x:.8e}")
}

/// `kind,alpha,video_metric,frame_metric,seed,steps`; one row per repeat,
/// then one row per setting with `seed = mean` when there are several repeats.
pub fn alpha_sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("kind,alpha,video_metric,frame_metric,seed,steps\n");
    for row in rows {
        for r in &row.results {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.kind,
                fmt_float(row.alpha),
                fmt_float(r.video_metric),
                fmt_float(r.frame_metric),
                r.seed,
                r.steps
            ));
        }
    }
    push_means(&mut out, rows, |row| {
        format!(
            "{},{},{},{},mean,{}\n",
            row.kind,
            fmt_float(row.alpha),
            fmt_float(row.mean_video()),
            fmt_float(row.mean_frame()),
            row.results[0].steps
        )
    });
    out
}

/// `strategy,video_metric,frame_metric,init_hash`, laid out like the sweep.
pub fn strategies_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("strategy,video_metric,frame_metric,init_hash\n");
    for row in rows {
        for r in &row.results {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.kind,
                fmt_float(r.video_metric),
                fmt_float(r.frame_metric),
                r.init_hash
            ));
        }
    }
    push_means(&mut out, rows, |row| {
        format!(
            "{}:mean,{},{},{}\n",
            row.kind,
            fmt_float(row.mean_video()),
            fmt_float(row.mean_frame()),
            row.results[0].init_hash
        )
    });
    out
}

fn push_means(out: &mut String, rows: &[SweepRow], line: impl Fn(&SweepRow) -> String) {
    if rows.iter().any(|r| r.results.len() > 1) {
        for row in rows {
            out.push_str(&line(row));
        }
    }
}

pub fn cosine_stats_csv(stats: &CosineStats) -> String {
    format!(
        "group,mean,std,pairs\nsame_video,{},{},{}\ndifferent_video,{},{},{}\n",
        fmt_float(stats.same_mean),
        fmt_float(stats.same_std),
        stats.same_pairs,
        fmt_float(stats.diff_mean),
        fmt_float(stats.diff_std),
        stats.diff_pairs
    )
}

pub fn embed_2d_csv(points: &[EmbeddedPoint]) -> String {
    let mut out = String::from("video_id,frame_index,x,y\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.video_id,
            p.frame_index,
            fmt_float(p.x),
            fmt_float(p.y)
        ));
    }
    out
}
