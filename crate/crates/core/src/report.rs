//! Metrics CSV streams and PNG sample grids.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::objectives::LossBundle;
use crate::tensor::{Real, Tensor};

pub const METRICS_HEADER: &str = "step,epoch,lr,l_pp,l_cd,l_adv_d,l_adv_g,total,frozen_masks,mean_zero_fraction";

/// One metrics row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBundle,
    pub frozen_masks: usize,
    pub zero_fractions: Vec<f64>,
}

impl MetricsRow {
    pub fn mean_zero_fraction(&self) -> f64 {
        if self.zero_fractions.is_empty() {
            0.0
        } else {
            self.zero_fractions.iter().sum::<f64>() / self.zero_fractions.len() as f64
        }
    }
}

/// Writes `metrics.csv` and, when masks exist, `mask_fractions.csv`.
pub struct MetricsWriter {
    main: BufWriter<File>,
    masks: Option<BufWriter<File>>,
    path: PathBuf,
    mask_names: Vec<String>,
    rows: usize,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

impl MetricsWriter {
    pub fn create(dir: &Path, mask_names: Vec<String>) -> Result<Self> {
        let path = dir.join("metrics.csv");
        let main = create(&path)?;
        let masks = if mask_names.is_empty() {
            None
        } else {
            Some(create(&dir.join("mask_fractions.csv"))?)
        };
        Ok(Self {
            main,
            masks,
            path,
            mask_names,
            rows: 0,
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        let io = |e| Error::io(&self.path, e);
        if self.rows == 0 {
            writeln!(self.main, "{METRICS_HEADER}").map_err(io)?;
            if let Some(m) = &mut self.masks {
                writeln!(m, "step,{}", self.mask_names.join(",")).map_err(io)?;
            }
        }
        let l = &row.losses;
        writeln!(
            self.main,
            "{},{},{:e},{},{},{},{},{},{},{}",
            row.step,
            row.epoch,
            row.lr,
            l.l_pp,
            l.l_cd,
            l.l_adv_d,
            l.l_adv_g,
            l.total_g,
            row.frozen_masks,
            row.mean_zero_fraction()
        )
        .map_err(io)?;
        if let Some(m) = &mut self.masks {
            let fr: Vec<String> = row.zero_fractions.iter().map(f64::to_string).collect();
            writeln!(m, "{},{}", row.step, fr.join(",")).map_err(io)?;
        }
        self.rows += 1;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.main.flush().map_err(|e| Error::io(&self.path, e))?;
        if let Some(m) = &mut self.masks {
            m.flush().map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Parses a metrics CSV back into `(header, rows of f64)`.
pub fn read_metrics(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .unwrap_or_default()
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| Error::Malformed(format!("metrics value `{v}`")))
                })
                .collect()
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok((header, rows))
}

/// Tiles `(N, 3, S, S)` images in `[−1, 1]` into an RGB PNG with `cols`
/// columns and a one-pixel border.
pub fn save_png_grid<T: Real>(path: &Path, images: &Tensor<T>, cols: usize) -> Result<()> {
    let (n, c, h, w) = images.dims4("png_grid")?;
    if c != 3 || n == 0 {
        return Err(Error::shape(
            "png_grid",
            format!("expected (N>0, 3, H, W), got {:?}", images.shape()),
        ));
    }
    let cols = cols.clamp(1, n);
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut buf = vec![255u8; gw * gh * 3];
    let data = images.data();
    for i in 0..n {
        let (oy, ox) = ((i / cols) * (h + 1) + 1, (i % cols) * (w + 1) + 1);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let v = data[((i * 3 + ch) * h + y) * w + x].to_f64().unwrap_or(0.0);
                    let px = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
                    buf[((oy + y) * gw + ox + x) * 3 + ch] = px;
                }
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), gw as u32, gh as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&buf)?;
    writer.finish()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_once_and_constant_columns() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(dir.path(), vec!["a".into(), "b".into()]).unwrap();
        for step in 0..3 {
            w.write(&MetricsRow {
                step,
                epoch: 0,
                lr: 2e-4,
                losses: LossBundle {
                    l_pp: 1.0,
                    ..Default::default()
                },
                frozen_masks: 1,
                zero_fractions: vec![0.25, 0.75],
            })
            .unwrap();
        }
        w.flush().unwrap();
        let (header, rows) = read_metrics(&dir.path().join("metrics.csv")).unwrap();
        assert_eq!(header.join(","), METRICS_HEADER);
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.len() == header.len()));
        assert_eq!(rows[0][9], 0.5);
        let masks = std::fs::read_to_string(dir.path().join("mask_fractions.csv")).unwrap();
        assert_eq!(masks.lines().next(), Some("step,a,b"));
    }

    #[test]
    fn png_grid_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let imgs = Tensor::<f32>::from_fn([5, 3, 4, 4], |i| ((i % 7) as f32 / 3.0) - 1.0);
        save_png_grid(&path, &imgs, 3).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
        assert!(save_png_grid(&path, &Tensor::<f32>::zeros([1, 1, 4, 4]), 1).is_err());
    }
}
