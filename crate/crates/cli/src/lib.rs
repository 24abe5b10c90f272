//! Command implementations behind the `irkd` binary.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use irkd_autograd::Tensor;
use irkd_core::checkpoint::Checkpoint;
use irkd_core::config::{Mode, RunConfig};
use irkd_core::dataset::{Dataset, GenerateOptions};
use irkd_core::inference::{evaluate_student, teacher_view};
use irkd_core::metrics::{attention_csv, attention_report, AttentionSummary, EvalReport};
use irkd_core::nets::{TeacherSpec, TinyUNet};
use irkd_core::synthdata::InfraredSample;
use irkd_core::trainer::{extract_tokens, RunDir, Trainer};
use irkd_core::vfm::{make_provider, FeatureProvider};
use irkd_core::{Error, Result};

pub fn cmd_generate(out: &Path, opts: &GenerateOptions) -> Result<Dataset> {
    let ds = Dataset::generate(opts)?;
    ds.save(out)?;
    Ok(ds)
}

fn provider_for(cfg: &RunConfig) -> Result<Option<Box<dyn FeatureProvider>>> {
    match cfg.mode {
        Mode::Full => make_provider(cfg.provider, &cfg.cache_dir, cfg.fallback_to_stub).map(Some),
        Mode::StudentOnly => Ok(None),
    }
}

/// Train from a config file, optionally resuming a checkpoint in place.
/// Returns the run directory.
pub fn cmd_train(config: &Path, resume: Option<&Path>) -> Result<PathBuf> {
    let cfg = RunConfig::load(config)?;
    let data = Dataset::load(&cfg.data_dir)?;
    let provider = provider_for(&cfg)?;
    let (mut trainer, dir) = match resume {
        Some(ck_path) => {
            let ck = Checkpoint::load(ck_path)?;
            let dir = RunDir::at(ck_path.parent().map(Path::to_path_buf).unwrap_or_default())?;
            (Trainer::resume(cfg, &data, provider.as_deref(), ck)?, dir)
        }
        None => {
            let dir = RunDir::create(&cfg)?;
            (Trainer::new(cfg, &data, provider.as_deref())?, dir)
        }
    };
    trainer.run(Some(&dir))?;
    let report = trainer.test_report()?;
    std::fs::write(dir.file("report.csv"), report.to_csv())
        .map_err(|e| Error::io(dir.file("report.csv"), e))?;
    println!("{}", report.to_table());
    Ok(dir.path)
}

fn backbone_of(ck: &Checkpoint) -> TinyUNet {
    TinyUNet {
        channels: ck.channels,
    }
}

fn split_samples<'a>(data: &'a Dataset, split: &str) -> Result<Vec<&'a InfraredSample>> {
    data.select(data.split_ids(split)?)
}

/// Student-only evaluation; neither the teacher nor a provider is built.
pub fn cmd_eval(ckpt: &Path, data_dir: &Path, split: &str, out: &Path) -> Result<EvalReport> {
    let ck = Checkpoint::load(ckpt)?;
    let data = Dataset::load(data_dir)?;
    let samples = split_samples(&data, split)?;
    let report = evaluate_student(&backbone_of(&ck), &ck.state.theta, &samples, split)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("report.csv");
    std::fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Output of [`cmd_analyze`].
pub struct Analysis {
    pub attention: Vec<(String, AttentionSummary)>,
    pub panels: Vec<PathBuf>,
    pub tiles_per_panel: usize,
}

/// Attention statistics per characteristic and one feature panel per
/// sample (at most `limit` panels).
pub fn cmd_analyze(
    ckpt: &Path,
    data_dir: &Path,
    split: &str,
    out: &Path,
    limit: usize,
) -> Result<Analysis> {
    let ck = Checkpoint::load(ckpt)?;
    if ck.config.mode != Mode::Full {
        return Err(Error::Config(
            "analysis needs a checkpoint of the full mode".into(),
        ));
    }
    let provider = make_provider(
        ck.config.provider,
        &ck.config.cache_dir,
        ck.config.fallback_to_stub,
    )
    .map_err(|e| Error::Provider(format!("feature provider unavailable for analysis: {e}")))?;
    let data = Dataset::load(data_dir)?;
    let samples = split_samples(&data, split)?;
    let backbone = backbone_of(&ck);
    let spec = TeacherSpec {
        blocks: ck.config.blocks,
        dim: provider.dim(),
        hidden: ck.config.scam_hidden,
        hook_channels: backbone.channels.to_vec(),
    };
    let tokens = extract_tokens(provider.as_ref(), &samples, ck.config.blocks)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut attention = Vec::new();
    let mut panels = Vec::new();
    let mut tiles_per_panel = 0;
    for (i, s) in samples.iter().enumerate() {
        let t = &tokens[&s.id];
        let view = teacher_view(
            &backbone,
            &spec,
            &ck.state.theta,
            &ck.state.phi,
            &s.image,
            t,
        )?;
        if i < limit {
            let (h, w) = s.shape();
            let mut tiles = vec![s.image.data().to_vec()];
            for (pre, post) in view.pre.iter().zip(&view.post) {
                tiles.push(channel_mean(pre, h, w));
                tiles.push(channel_mean(post, h, w));
            }
            tiles.push(score_map(&view.attention, provider.patch_size(), h, w));
            tiles.push(view.probs.clone());
            tiles.push(s.gt_mask.to_f64());
            tiles_per_panel = tiles.len();
            let path = out.join(format!("panel_{}.png", s.id));
            render_panel(&tiles, h, w)
                .save(&path)
                .map_err(|e| Error::Image {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
            panels.push(path);
        }
        attention.push(view.attention);
    }
    let tags: Vec<_> = samples.iter().map(|s| s.tag).collect();
    let report = attention_report(&tags, &attention)?;
    let path = out.join("attn.csv");
    std::fs::write(&path, attention_csv(&report)).map_err(|e| Error::io(&path, e))?;
    Ok(Analysis {
        attention: report,
        panels,
        tiles_per_panel,
    })
}

/// Channel mean of a `(C, h, w)` map, nearest-upsampled to `H × W`.
pub fn channel_mean(f: &Tensor, h_out: usize, w_out: usize) -> Vec<f64> {
    let s = f.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut mean = vec![0.0; h * w];
    for k in 0..c {
        for (m, v) in mean.iter_mut().zip(&f.data()[k * h * w..(k + 1) * h * w]) {
            *m += v / c as f64;
        }
    }
    (0..h_out * w_out)
        .map(|i| mean[(i / w_out) * h / h_out * w + (i % w_out) * w / w_out])
        .collect()
}

/// Token attention spread over the patches it covers, cropped to `H × W`.
pub fn score_map(attention: &[f64], patch: usize, h: usize, w: usize) -> Vec<f64> {
    let gw = w.div_ceil(patch);
    (0..h * w)
        .map(|i| attention[(i / w) / patch * gw + (i % w) / patch])
        .collect()
}

/// Min–max normalised tiles in one row, separated by 2-pixel gaps.
pub fn render_panel(tiles: &[Vec<f64>], h: usize, w: usize) -> GrayImage {
    const GAP: usize = 2;
    let width = tiles.len() * w + tiles.len().saturating_sub(1) * GAP;
    let mut img = GrayImage::from_pixel(width as u32, h as u32, Luma([128]));
    for (k, tile) in tiles.iter().enumerate() {
        let lo = tile.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = tile.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        for (i, v) in tile.iter().enumerate() {
            let x = k * (w + GAP) + i % w;
            let level = (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8;
            img.put_pixel(x as u32, (i / w) as u32, Luma([level]));
        }
    }
    img
}

/// `(epoch, train IoU, test IoU)` rows of an epoch log, skipping the
/// epoch-0 initial row.
pub fn parse_epoch_log(text: &str) -> Result<Vec<(usize, f64, f64)>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty log".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let find = |name: &str| {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("missing column '{name}'"),
            })
    };
    let (ie, itr, ite) = (find("epoch")?, find("train_IoU")?, find("test_IoU")?);
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |m: String| Error::Parse {
            line: i + 1,
            message: m,
        };
        if f.len() != cols.len() {
            return Err(bad(format!(
                "expected {} fields, found {}",
                cols.len(),
                f.len()
            )));
        }
        let epoch: usize = f[ie]
            .parse()
            .map_err(|_| bad(format!("bad epoch '{}'", f[ie])))?;
        let num = |j: usize| {
            f[j].parse::<f64>()
                .map_err(|_| bad(format!("bad number '{}'", f[j])))
        };
        let (tr, te) = (num(itr)?, num(ite)?);
        if epoch > 0 {
            rows.push((epoch, tr, te));
        }
    }
    Ok(rows)
}

const PLOT_W: u32 = 320;
const PLOT_H: u32 = 240;
const MARGIN: u32 = 20;

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Two panels (train left, test right) of IoU against epoch; y spans
/// [0, 1], gridlines every 0.25, one marker per epoch.
pub fn render_curves(rows: &[(usize, f64, f64)]) -> RgbImage {
    let mut img = RgbImage::from_pixel(2 * PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let last = rows.iter().map(|r| r.0).max().unwrap_or(1).max(2);
    let first = rows.iter().map(|r| r.0).min().unwrap_or(1).min(last - 1);
    let colors = [Rgb([31, 119, 180]), Rgb([214, 39, 40])];
    for panel in 0..2u32 {
        let ox = (panel * PLOT_W + MARGIN) as i64;
        let (pw, ph) = ((PLOT_W - 2 * MARGIN) as i64, (PLOT_H - 2 * MARGIN) as i64);
        let oy = MARGIN as i64 + ph;
        for q in 1..=4 {
            let y = oy - ph * q / 4;
            line(&mut img, (ox, y), (ox + pw, y), Rgb([225, 225, 225]));
        }
        line(&mut img, (ox, oy), (ox + pw, oy), Rgb([0, 0, 0]));
        line(&mut img, (ox, oy), (ox, oy - ph), Rgb([0, 0, 0]));
        let to_px = |e: usize, v: f64| {
            let x = ox + ((e - first) as f64 / (last - first) as f64 * pw as f64).round() as i64;
            let y = oy - (v.clamp(0.0, 1.0) * ph as f64).round() as i64;
            (x, y)
        };
        let pts: Vec<(i64, i64)> = rows
            .iter()
            .map(|&(e, tr, te)| to_px(e, if panel == 0 { tr } else { te }))
            .collect();
        let color = colors[panel as usize];
        for pair in pts.windows(2) {
            line(&mut img, pair[0], pair[1], color);
        }
        for &(x, y) in &pts {
            for d in -1..=1 {
                line(&mut img, (x - 1, y + d), (x + 1, y + d), color);
            }
        }
    }
    img
}

/// Plot an epoch log. Nothing is written when the log has no epochs.
pub fn cmd_plot(log: &Path, out: &Path) -> Result<usize> {
    let text = std::fs::read_to_string(log).map_err(|e| Error::io(log, e))?;
    let rows = parse_epoch_log(&text)?;
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "{} has no epoch rows to plot",
            log.display()
        )));
    }
    render_curves(&rows).save(out).map_err(|e| Error::Image {
        path: out.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(rows.len())
}
