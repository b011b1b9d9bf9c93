//! On-disk layout: an image directory plus `labels.csv`
//! (`image_id,patient_id,labels`, labels `|`-separated) and an optional
//! `bboxes.csv` (`image_id,class,x,y,w,h`, top-left corner and size relative
//! to the image).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, GrayImage, ImageFormat};
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Result, WsrpnError};
use crate::metrics::{BBox, GroundTruthBox};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPaths {
    pub image_dir: PathBuf,
    pub label_csv: PathBuf,
    pub bbox_csv: Option<PathBuf>,
}

impl DatasetPaths {
    /// The layout written by [`write_dataset`].
    pub fn in_dir(dir: &Path) -> Self {
        let bbox = dir.join("bboxes.csv");
        Self {
            image_dir: dir.join("images"),
            label_csv: dir.join("labels.csv"),
            bbox_csv: bbox.exists().then_some(bbox),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    image_id: String,
    patient_id: String,
    labels: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct BoxRow {
    image_id: String,
    class: String,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => WsrpnError::io(path, io),
            other => WsrpnError::Image {
                path: path.to_path_buf(),
                source: other,
            },
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let img =
        GrayImage::from_raw(width as u32, height as u32, pixels.to_vec()).ok_or_else(|| {
            WsrpnError::Data(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            ))
        })?;
    img.save_with_format(path, ImageFormat::Pnm)
        .map_err(|e| WsrpnError::Image {
            path: path.to_path_buf(),
            source: e,
        })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> WsrpnError + '_ {
    move |e| WsrpnError::Csv {
        path: path.to_path_buf(),
        source: e,
    }
}

fn resolve_image(dir: &Path, id: &str) -> Result<PathBuf> {
    let direct = dir.join(id);
    if direct.is_file() {
        return Ok(direct);
    }
    for ext in ["pgm", "png"] {
        let p = dir.join(format!("{id}.{ext}"));
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(WsrpnError::io(
        direct,
        std::io::Error::new(std::io::ErrorKind::NotFound, "image file not found"),
    ))
}

/// Grayscale pixels in `[0, 1]`, resized to `side x side` when needed.
pub fn load_image(path: &Path, side: usize) -> Result<Vec<f32>> {
    let (w, h, px) = read_pgm(path)?;
    let px = if w != side || h != side {
        let img =
            GrayImage::from_raw(w as u32, h as u32, px).expect("decoded buffer matches its size");
        imageops::resize(
            &img,
            side as u32,
            side as u32,
            imageops::FilterType::Triangle,
        )
        .into_raw()
    } else {
        px
    };
    Ok(px.iter().map(|&v| v as f32 / 255.0).collect())
}

fn class_index(name: &str, classes: &[String]) -> Result<usize> {
    classes
        .iter()
        .position(|c| c == name)
        .ok_or_else(|| WsrpnError::UnknownClass {
            name: name.to_string(),
            valid: classes.to_vec(),
        })
}

fn split_labels(s: &str) -> impl Iterator<Item = &str> {
    s.split('|').map(str::trim).filter(|t| !t.is_empty())
}

/// Reads the two-CSV layout. `classes` fixes the class list; when absent it is
/// the sorted set of names in the label file.
pub fn load_dataset(
    paths: &DatasetPaths,
    classes: Option<&[String]>,
    side: usize,
) -> Result<Dataset> {
    let lp = &paths.label_csv;
    let mut rdr = csv::Reader::from_path(lp).map_err(csv_err(lp))?;
    let rows: Vec<LabelRow> = rdr
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err(lp))?;
    let class_names: Vec<String> = match classes {
        Some(c) => c.to_vec(),
        None => {
            let mut all: Vec<String> = rows
                .iter()
                .flat_map(|r| split_labels(&r.labels))
                .map(String::from)
                .collect();
            all.sort();
            all.dedup();
            all
        }
    };
    if class_names.is_empty() {
        return Err(WsrpnError::Data("no classes found".into()));
    }
    let mut samples = Vec::with_capacity(rows.len());
    let mut index = HashMap::new();
    for r in rows {
        let mut labels = vec![false; class_names.len()];
        for name in split_labels(&r.labels) {
            labels[class_index(name, &class_names)?] = true;
        }
        if index.insert(r.image_id.clone(), samples.len()).is_some() {
            return Err(WsrpnError::Data(format!(
                "duplicate image_id {}",
                r.image_id
            )));
        }
        let image = load_image(&resolve_image(&paths.image_dir, &r.image_id)?, side)?;
        samples.push(Sample {
            id: r.image_id,
            patient: r.patient_id,
            image,
            labels,
            boxes: Vec::new(),
        });
    }
    if let Some(bp) = &paths.bbox_csv {
        let mut rdr = csv::Reader::from_path(bp).map_err(csv_err(bp))?;
        for row in rdr.deserialize::<BoxRow>() {
            let row = row.map_err(csv_err(bp))?;
            let class = class_index(row.class.trim(), &class_names)?;
            let &i = index.get(&row.image_id).ok_or_else(|| {
                WsrpnError::Data(format!("box for unknown image {}", row.image_id))
            })?;
            let s = &mut samples[i];
            if s.boxes.iter().any(|b| b.class == class) {
                return Err(WsrpnError::Data(format!(
                    "image {} has more than one {} box; the format allows one box per class",
                    row.image_id, row.class
                )));
            }
            if !(row.w > 0.0 && row.h > 0.0) {
                return Err(WsrpnError::Data(format!(
                    "box of image {} has non-positive extent",
                    row.image_id
                )));
            }
            if !s.labels[class] {
                log::warn!(
                    "image {} has a {} box but no such label; adding it",
                    row.image_id,
                    row.class
                );
                s.labels[class] = true;
            }
            s.boxes.push(GroundTruthBox {
                class,
                bbox: BBox::from_corners(row.x, row.y, row.x + row.w, row.y + row.h).clip_unit(),
            });
        }
    }
    if samples.iter().all(|s| s.boxes.is_empty()) {
        log::warn!("dataset has no bounding boxes; validation and test splits will be empty");
    }
    Ok(Dataset {
        class_names,
        side,
        samples,
    })
}

/// Writes images as 8-bit PGM plus `labels.csv`, `bboxes.csv` and `classes.txt`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<DatasetPaths> {
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| WsrpnError::io(&image_dir, e))?;
    let label_csv = dir.join("labels.csv");
    let bbox_csv = dir.join("bboxes.csv");
    let mut lw = csv::Writer::from_path(&label_csv).map_err(csv_err(&label_csv))?;
    let mut bw = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&bbox_csv)
        .map_err(csv_err(&bbox_csv))?;
    bw.write_record(["image_id", "class", "x", "y", "w", "h"])
        .map_err(csv_err(&bbox_csv))?;
    for s in &dataset.samples {
        let px: Vec<u8> = s
            .image
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        write_pgm(
            &image_dir.join(format!("{}.pgm", s.id)),
            dataset.side,
            dataset.side,
            &px,
        )?;
        let names: Vec<&str> = s
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l)
            .map(|(c, _)| dataset.class_names[c].as_str())
            .collect();
        lw.serialize(LabelRow {
            image_id: s.id.clone(),
            patient_id: s.patient.clone(),
            labels: names.join("|"),
        })
        .map_err(csv_err(&label_csv))?;
        for b in &s.boxes {
            let (x0, y0, _, _) = b.bbox.corners();
            bw.serialize(BoxRow {
                image_id: s.id.clone(),
                class: dataset.class_names[b.class].clone(),
                x: x0,
                y: y0,
                w: b.bbox.w,
                h: b.bbox.h,
            })
            .map_err(csv_err(&bbox_csv))?;
        }
    }
    lw.flush().map_err(|e| WsrpnError::io(&label_csv, e))?;
    bw.flush().map_err(|e| WsrpnError::io(&bbox_csv, e))?;
    let classes = dir.join("classes.txt");
    fs::write(&classes, dataset.class_names.join("\n") + "\n")
        .map_err(|e| WsrpnError::io(&classes, e))?;
    Ok(DatasetPaths {
        image_dir,
        label_csv,
        bbox_csv: Some(bbox_csv),
    })
}

/// Class names from a newline-separated file.
pub fn read_classes(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| WsrpnError::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{synthetic_dataset, SyntheticSpec};

    #[test]
    fn roundtrip_synthetic_layout() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            image_size: 32,
            blob_size: (0.25, 0.4),
            ..SyntheticSpec::default()
        };
        let ds = synthetic_dataset(&spec, 4, 4, false).unwrap();
        let paths = write_dataset(dir.path(), &ds).unwrap();
        let classes = read_classes(&dir.path().join("classes.txt")).unwrap();
        let back = load_dataset(&paths, Some(&classes), 32).unwrap();
        assert_eq!(back.class_names, ds.class_names);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.boxes.len(), b.boxes.len());
            for (x, y) in a.boxes.iter().zip(&b.boxes) {
                assert_eq!(x.class, y.class);
                assert!(
                    (x.bbox.cx - y.bbox.cx).abs() < 1e-12 && (x.bbox.w - y.bbox.w).abs() < 1e-12
                );
            }
        }
    }

    fn write_one_image(dir: &Path, id: &str) {
        fs::create_dir_all(dir.join("images")).unwrap();
        write_pgm(
            &dir.join("images").join(format!("{id}.pgm")),
            4,
            4,
            &[128; 16],
        )
        .unwrap();
    }

    #[test]
    fn label_parsing_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_one_image(dir.path(), "a");
        let labels = dir.path().join("labels.csv");
        fs::write(&labels, "image_id,patient_id,labels\na,p1,ClassA|ClassB\n").unwrap();
        let paths = DatasetPaths {
            image_dir: dir.path().join("images"),
            label_csv: labels.clone(),
            bbox_csv: None,
        };
        let classes: Vec<String> = ["ClassA", "ClassB", "ClassC"].map(String::from).to_vec();
        let ds = load_dataset(&paths, Some(&classes), 4).unwrap();
        assert_eq!(ds.samples[0].labels, vec![true, true, false]);

        let err = load_dataset(&paths, Some(&classes[1..]), 4).unwrap_err();
        match err {
            WsrpnError::UnknownClass { name, valid } => {
                assert_eq!(name, "ClassA");
                assert_eq!(valid.len(), 2);
            }
            e => panic!("unexpected {e}"),
        }

        fs::write(&labels, "image_id,patient_id,labels\nmissing,p1,\n").unwrap();
        let err = load_dataset(&paths, Some(&classes), 4).unwrap_err();
        assert!(err.to_string().contains("missing"));
    }

    #[test]
    fn duplicate_class_box_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_one_image(dir.path(), "a");
        fs::write(
            dir.path().join("labels.csv"),
            "image_id,patient_id,labels\na,p1,X\n",
        )
        .unwrap();
        fs::write(
            dir.path().join("bboxes.csv"),
            "image_id,class,x,y,w,h\na,X,0.1,0.1,0.2,0.2\na,X,0.5,0.5,0.2,0.2\n",
        )
        .unwrap();
        let paths = DatasetPaths::in_dir(dir.path());
        assert!(matches!(
            load_dataset(&paths, None, 4),
            Err(WsrpnError::Data(_))
        ));
    }
}
