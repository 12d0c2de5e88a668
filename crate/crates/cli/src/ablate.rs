use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use cacgen_core::benchmark::{ablation_sweep, truth_for_scene, AblationRow, BenchScene};
use cacgen_core::eval::DetectorConfig;
use cacgen_core::layout::parse_scene;
use clap::Args;
use serde::Serialize;

use crate::options::{load_vocab, pipeline, SamplingArgs, Threads};

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Scene JSON file.
    pub scene: PathBuf,
    /// MD ratios to sweep; duplicates are dropped.
    #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8,1.0")]
    pub ratios: Vec<f64>,
    /// Seeds per ratio and arm (0..N); KID needs at least two.
    #[arg(long, default_value_t = 4)]
    pub seeds: usize,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// CSV output (stdout when omitted).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Also write an SVG plot of mAP50 against the ratio.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct CsvRow {
    md_ratio: f64,
    arm: &'static str,
    map50: f64,
    kid: Option<f64>,
}

pub fn run(args: &AblateArgs, threads: Threads) -> Result<()> {
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let vocab = load_vocab(args.sampling.vocab.as_deref())?;
    let scene = parse_scene(&args.scene, &vocab)
        .with_context(|| format!("reading scene {}", args.scene.display()))?;
    let (palette, truth, reference) = truth_for_scene(&scene, &vocab);
    if palette.is_empty() {
        bail!("scene has no region naming a palette concept; nothing to localize");
    }
    let bench = BenchScene {
        scene: scene.clone(),
        truth,
        reference,
    };
    let scenes = vec![bench; args.seeds];
    let p = pipeline(vocab, args.sampling.denoiser())?;
    let base = args.sampling.sampler(Some(&scene), 0, threads.exec);
    let rows = ablation_sweep(
        &p,
        &scenes,
        &base,
        &args.ratios,
        &palette,
        DetectorConfig::default(),
        threads.exec,
    )?;
    check_directions(&rows);

    let sink: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(
            fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        ),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for r in &rows {
        w.serialize(CsvRow {
            md_ratio: r.md_ratio,
            arm: if r.cac { "cac" } else { "no_cac" },
            map50: r.map50,
            kid: r.kid,
        })?;
    }
    w.flush()?;
    if let Some(path) = &args.svg {
        fs::write(path, svg_plot(&rows)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// Logs the expected trends: more region-wise steps help the uncontrolled
/// arm, and control never hurts at a fixed ratio.
fn check_directions(rows: &[AblationRow]) {
    let arm = |cac: bool| rows.iter().filter(move |r| r.cac == cac);
    let no_cac: Vec<_> = arm(false).collect();
    if let (Some(first), Some(last)) = (no_cac.first(), no_cac.last()) {
        if first.md_ratio == 0.0 && last.md_ratio == 1.0 {
            if last.map50 >= first.map50 {
                log::info!(
                    "no-CAC arm: mAP50 at ratio 1 ({:.4}) >= ratio 0 ({:.4})",
                    last.map50,
                    first.map50
                );
            } else {
                log::warn!(
                    "no-CAC arm: mAP50 at ratio 1 ({:.4}) < ratio 0 ({:.4})",
                    last.map50,
                    first.map50
                );
            }
        }
    }
    for (c, n) in arm(true).zip(arm(false)) {
        if c.map50 < n.map50 {
            log::warn!(
                "ratio {}: CAC mAP50 {:.4} below no-CAC {:.4}",
                c.md_ratio,
                c.map50,
                n.map50
            );
        }
    }
}

fn svg_plot(rows: &[AblationRow]) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let x = |r: f64| pad + r * (w - 2.0 * pad);
    let y = |m: f64| h - pad - m * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {} V{} H{}" stroke="black" fill="none"/>"#,
        pad,
        h - pad,
        w - pad
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">MD ratio</text>"#,
        w / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">mAP50</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (cac, color, label) in [(true, "#d62728", "CAC"), (false, "#1f77b4", "no CAC")] {
        let pts: Vec<String> = rows
            .iter()
            .filter(|r| r.cac == cac)
            .map(|r| format!("{:.1},{:.1}", x(r.md_ratio), y(r.map50)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let ly = if cac { pad } else { pad + 16.0 };
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{color}">{label}</text>"#,
            w - pad - 60.0
        );
    }
    s.push_str("</svg>\n");
    s
}
