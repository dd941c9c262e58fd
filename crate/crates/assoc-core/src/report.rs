//! Static report emitters: a machine-readable JSON superset and a
//! self-contained HTML rendering with per-k stats tables, control flags,
//! baseline comparisons, and per-novel timeline strips.

use std::collections::BTreeMap;
use std::fs;

use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterStats, SourceTag};
use crate::error::{Error, Result};
use crate::inference::NovelProfile;
use crate::synthbench::BenchmarkReport;
use crate::validation::ControlReport;
use crate::workspace::Workspace;

/// Reference statistics from the original full-scale corpus run (9,766
/// books, 24.96M passages). Not reproducible at desk scale; included in
/// every report as context rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FullScaleReference {
    pub corpus: String,
    pub training_accuracy_epoch150: f64,
    pub training_loss_epoch150: f64,
    pub shuffle_recall_collapse: f64,
    pub cluster_stats: Vec<ReferenceStatsRow>,
    pub selectivity: Vec<ReferenceSelectivityRow>,
    pub random_mlp_mean_books: f64,
    pub random_mlp_mean_cosine: f64,
    pub random_mlp_mean_dominance: f64,
    pub context_enriched_mean_cosine_2k: f64,
    pub raw_mean_cosine_2k: f64,
    pub association_mean_cosine_2k: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceStatsRow {
    pub k: usize,
    pub threshold: u64,
    pub passing: usize,
    pub mean_cosine: f64,
    pub mean_books: f64,
    pub mean_dominance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceSelectivityRow {
    pub novel: String,
    pub activation_association: usize,
    pub activation_raw: usize,
    pub top5_association: f64,
    pub top5_raw: f64,
}

pub fn full_scale_reference() -> FullScaleReference {
    FullScaleReference {
        corpus: "gutenberg-10k reference run".into(),
        training_accuracy_epoch150: 0.4275,
        training_loss_epoch150: 3.030,
        shuffle_recall_collapse: 0.952,
        cluster_stats: vec![
            ReferenceStatsRow { k: 50, threshold: 50, passing: 50, mean_cosine: 0.302, mean_books: 5860.0, mean_dominance: 0.022 },
            ReferenceStatsRow { k: 100, threshold: 100, passing: 100, mean_cosine: 0.378, mean_books: 4508.0, mean_dominance: 0.040 },
            ReferenceStatsRow { k: 250, threshold: 200, passing: 241, mean_cosine: 0.436, mean_books: 3329.0, mean_dominance: 0.063 },
            ReferenceStatsRow { k: 500, threshold: 500, passing: 472, mean_cosine: 0.479, mean_books: 2502.0, mean_dominance: 0.090 },
            ReferenceStatsRow { k: 1000, threshold: 500, passing: 857, mean_cosine: 0.513, mean_books: 1885.0, mean_dominance: 0.120 },
            ReferenceStatsRow { k: 2000, threshold: 1000, passing: 980, mean_cosine: 0.499, mean_books: 1797.0, mean_dominance: 0.081 },
        ],
        selectivity: vec![
            ReferenceSelectivityRow { novel: "Alice in Wonderland".into(), activation_association: 51, activation_raw: 87, top5_association: 0.776, top5_raw: 0.322 },
            ReferenceSelectivityRow { novel: "Pride and Prejudice".into(), activation_association: 80, activation_raw: 89, top5_association: 0.665, top5_raw: 0.252 },
            ReferenceSelectivityRow { novel: "Frankenstein".into(), activation_association: 83, activation_raw: 96, top5_association: 0.606, top5_raw: 0.424 },
            ReferenceSelectivityRow { novel: "The War of the Worlds".into(), activation_association: 86, activation_raw: 86, top5_association: 0.526, top5_raw: 0.367 },
            ReferenceSelectivityRow { novel: "Dracula".into(), activation_association: 98, activation_raw: 100, top5_association: 0.391, top5_raw: 0.195 },
        ],
        random_mlp_mean_books: 8553.0,
        random_mlp_mean_cosine: 0.473,
        random_mlp_mean_dominance: 0.011,
        context_enriched_mean_cosine_2k: 0.861,
        raw_mean_cosine_2k: 0.493,
        association_mean_cosine_2k: 0.454,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileSection {
    pub name: String,
    pub profiles: Vec<NovelProfile>,
    /// Raw-baseline profiles at matching k values, when computed.
    pub raw_profiles: Vec<NovelProfile>,
}

/// The machine-readable report. Sections are `None` when the corresponding
/// workspace artifacts are absent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub generated_unix_secs: u64,
    pub workspace_root: String,
    pub cluster_stats: BTreeMap<String, Vec<ClusterStats>>,
    pub controls: Vec<ControlReport>,
    pub benchmark: Option<BenchmarkReport>,
    pub profiles: Vec<ProfileSection>,
    pub absent_sections: Vec<String>,
    pub reference: FullScaleReference,
}

/// Assemble the report from whatever artifacts the workspace holds.
pub fn build_report(ws: &Workspace) -> Result<Report> {
    let mut cluster_stats: BTreeMap<String, Vec<ClusterStats>> = BTreeMap::new();
    let mut absent = Vec::new();

    for source in [
        SourceTag::Association,
        SourceTag::Raw,
        SourceTag::Context,
        SourceTag::RandomMlp,
    ] {
        let mut rows = Vec::new();
        for &k in &ws.config.clustering.ks {
            let path = ws.stats_path(source, k);
            if let Ok(text) = fs::read_to_string(&path) {
                let stats: ClusterStats = serde_json::from_str(&text)
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                rows.push(stats);
            }
        }
        if rows.is_empty() {
            absent.push(format!("cluster_stats/{}", source.as_str()));
        } else {
            cluster_stats.insert(source.as_str().to_owned(), rows);
        }
    }

    let mut controls = Vec::new();
    for &k in &ws.config.clustering.ks {
        let path = ws.controls_path(k);
        if let Ok(text) = fs::read_to_string(&path) {
            let report: ControlReport = serde_json::from_str(&text)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            controls.push(report);
        }
    }
    if controls.is_empty() {
        absent.push("controls".into());
    }

    let bench_path = ws.reports_dir().join("bench.json");
    let benchmark = match fs::read_to_string(&bench_path) {
        Ok(text) => Some(
            serde_json::from_str(&text)
                .map_err(|e| Error::Data(format!("{}: {e}", bench_path.display())))?,
        ),
        Err(_) => {
            absent.push("benchmark".into());
            None
        }
    };

    let mut profiles = Vec::new();
    if let Ok(entries) = fs::read_dir(ws.reports_dir()) {
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with("profile_") && n.ends_with(".json"))
                    .unwrap_or(false)
            })
            .collect();
        paths.sort();
        for path in paths {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let section: ProfileSection = serde_json::from_str(&text)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            profiles.push(section);
        }
    }
    if profiles.is_empty() {
        absent.push("profiles".into());
    }

    Ok(Report {
        generated_unix_secs: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        workspace_root: ws.root().display().to_string(),
        cluster_stats,
        controls,
        benchmark,
        profiles,
        absent_sections: absent,
        reference: full_scale_reference(),
    })
}

/// Emit report.json and report.html into the workspace reports directory.
pub fn emit_report(ws: &Workspace) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    let report = build_report(ws)?;
    let json_path = ws.reports_dir().join("report.json");
    let html_path = ws.reports_dir().join("report.html");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Data(format!("report encode: {e}")))?;
    fs::write(&json_path, &json).map_err(|e| Error::io(&json_path, e))?;
    fs::write(&html_path, render_html(&report)).map_err(|e| Error::io(&html_path, e))?;
    Ok((json_path, html_path))
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Stable cluster color for the timeline strips.
fn cluster_color(id: u32, k: usize) -> String {
    let hue = (id as u64 * 360 / k.max(1) as u64 + (id as u64 * 47) % 23) % 360;
    format!("hsl({hue}, 62%, 52%)")
}

fn stats_table(rows: &[ClusterStats]) -> String {
    let mut html = String::from(
        "<table><tr><th>k</th><th>passing</th><th>mean cosine</th>\
         <th>mean books</th><th>mean dominance</th></tr>",
    );
    for s in rows {
        html.push_str(&format!(
            "<tr><td>{}</td><td>{}/{}</td><td>{:.3}</td><td>{:.1}</td><td>{:.1}%</td></tr>",
            s.k,
            s.passing,
            s.k,
            s.mean_cosine,
            s.mean_books,
            s.mean_dominance * 100.0
        ));
    }
    html.push_str("</table>");
    html
}

fn timeline_strip(profile: &NovelProfile) -> String {
    // Run-length encode the assignment sequence into proportional bars.
    let mut html = String::from("<div class=\"strip\">");
    let n = profile.assignments.len().max(1);
    let mut start = 0usize;
    while start < profile.assignments.len() {
        let id = profile.assignments[start];
        let mut end = start;
        while end < profile.assignments.len() && profile.assignments[end] == id {
            end += 1;
        }
        let width = (end - start) as f64 / n as f64 * 100.0;
        html.push_str(&format!(
            "<span title=\"cluster {id}: positions {start}..{end}\" \
             style=\"width:{width:.3}%;background:{}\"></span>",
            cluster_color(id, profile.k)
        ));
        start = end;
    }
    html.push_str("</div>");
    html
}

/// Self-contained HTML: inline styles, no external requests.
pub fn render_html(report: &Report) -> String {
    let mut html = String::from(
        "<!doctype html><html><head><meta charset=\"utf-8\">\
         <title>Concept map report</title><style>\
         body{font-family:system-ui,sans-serif;margin:2rem;max-width:70rem}\
         h1,h2,h3{margin-top:1.6rem}\
         table{border-collapse:collapse;margin:.5rem 0}\
         td,th{border:1px solid #bbb;padding:.25rem .6rem;text-align:right}\
         th{background:#eee}\
         .strip{display:flex;height:18px;width:100%;border:1px solid #999;margin:.3rem 0}\
         .strip span{display:inline-block;height:100%}\
         .absent{color:#888;font-style:italic}\
         .ref{color:#555}\
         </style></head><body><h1>Concept map report</h1>",
    );

    for (source, rows) in &report.cluster_stats {
        html.push_str(&format!("<h2>Cluster statistics: {}</h2>", esc(source)));
        html.push_str(&stats_table(rows));
    }

    if !report.controls.is_empty() {
        html.push_str("<h2>Confound controls</h2>");
        for c in &report.controls {
            html.push_str(&format!(
                "<h3>k = {}</h3><p>position flagged: {} / {k}; token flagged: {} / {k}; \
                 dominance flagged: {} / {k}</p>",
                c.k,
                c.position_flagged,
                c.token_flagged,
                c.dominance_flagged,
                k = c.k
            ));
        }
    }

    if let Some(bench) = &report.benchmark {
        html.push_str("<h2>Planted benchmark</h2><table><tr><th>pipeline</th><th>NMI vs functions</th><th>ARI</th></tr>");
        for (name, score) in [
            ("raw", &bench.raw),
            ("association", &bench.association),
            ("shuffled-order", &bench.shuffled),
        ] {
            html.push_str(&format!(
                "<tr><td>{name}</td><td>{:.3}</td><td>{:.3}</td></tr>",
                score.nmi_vs_functions, score.ari_vs_functions
            ));
        }
        html.push_str("</table>");
        html.push_str(&format!(
            "<p>NMI margin (association − raw): {:.3}. Cross-boundary recall: trained {:.3}, \
             shuffled-order {:.3} (relative drop {:.1}%).</p>",
            bench.nmi_margin,
            bench.recall_trained,
            bench.recall_shuffled,
            bench.recall_relative_drop * 100.0
        ));
    }

    if !report.profiles.is_empty() {
        html.push_str("<h2>Unseen-text profiles</h2>");
        for section in &report.profiles {
            html.push_str(&format!("<h3>{}</h3>", esc(&section.name)));
            for p in &section.profiles {
                html.push_str(&format!(
                    "<p>k = {}: activation {}/{}, top-5 concentration {:.1}%</p>",
                    p.k,
                    p.activation,
                    p.k,
                    p.top5_concentration * 100.0
                ));
                html.push_str(&timeline_strip(p));
            }
        }
    }

    if !report.absent_sections.is_empty() {
        html.push_str("<h2>Absent sections</h2><ul>");
        for s in &report.absent_sections {
            html.push_str(&format!("<li class=\"absent\">{}</li>", esc(s)));
        }
        html.push_str("</ul>");
    }

    let r = &report.reference;
    html.push_str(&format!(
        "<h2 class=\"ref\">Full-scale reference context</h2>\
         <p class=\"ref\">{}: training accuracy {:.2}% (loss {:.3}) at epoch 150; \
         temporal shuffle collapses cross-boundary recall by {:.1}%.</p>",
        esc(&r.corpus),
        r.training_accuracy_epoch150 * 100.0,
        r.training_loss_epoch150,
        r.shuffle_recall_collapse * 100.0
    ));
    html.push_str(
        "<table class=\"ref\"><tr><th>k</th><th>threshold</th><th>passing</th>\
         <th>mean cosine</th><th>mean books</th><th>mean dominance</th></tr>",
    );
    for row in &r.cluster_stats {
        html.push_str(&format!(
            "<tr><td>{}</td><td>{}</td><td>{}/{}</td><td>{:.3}</td><td>{:.0}</td><td>{:.1}%</td></tr>",
            row.k, row.threshold, row.passing, row.k, row.mean_cosine, row.mean_books,
            row.mean_dominance * 100.0
        ));
    }
    html.push_str("</table>");
    html.push_str(
        "<table class=\"ref\"><tr><th>novel</th><th>activation (assoc)</th>\
         <th>activation (raw)</th><th>top-5 (assoc)</th><th>top-5 (raw)</th></tr>",
    );
    for row in &r.selectivity {
        html.push_str(&format!(
            "<tr><td>{}</td><td>{}/100</td><td>{}/100</td><td>{:.1}%</td><td>{:.1}%</td></tr>",
            esc(&row.novel),
            row.activation_association,
            row.activation_raw,
            row.top5_association * 100.0,
            row.top5_raw * 100.0
        ));
    }
    html.push_str("</table></body></html>");
    html
}
