//! CSV ingestion and export.
//!
//! - ROI series: one file per subject named `<subject_id>.csv`, one row per
//!   frame, one column per ROI, comma separated, optional header row.
//! - Phenotype: header `subject_id,site_id,label`; labels `ASD`/`HC`/`1`/`0`.
//!
//! Synthetic datasets are exported in the same layout, plus an
//! `informative_rois.csv` ground-truth file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{RoiTimeSeries, SynthDataset, ASD, HC};
use crate::{Error, Result};

fn parse_err(path: &Path, row: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        row,
        message: message.into(),
    }
}

/// Reads one subject's frames × ROIs matrix. Row indices in errors are
/// 0-based over the file's lines.
pub fn load_roi_csv(path: &Path) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut values = Vec::new();
    let mut width: Option<usize> = None;
    let mut rows = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<Option<f64>> = record.iter().map(|c| c.parse::<f64>().ok()).collect();
        if line == 0 && parsed.iter().any(Option::is_none) {
            // header row
            continue;
        }
        match width {
            None => width = Some(parsed.len()),
            Some(w) if w != parsed.len() => {
                return Err(parse_err(path, line, format!("expected {w} columns, found {}", parsed.len())));
            }
            _ => {}
        }
        for (col, v) in parsed.into_iter().enumerate() {
            let v = v.ok_or_else(|| parse_err(path, line, format!("column {col}: `{}` is not a number", &record[col])))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("column {col}: non-finite value")));
            }
            values.push(v);
        }
        rows += 1;
    }
    let width = width.ok_or_else(|| Error::Empty(format!("{} has no data rows", path.display())))?;
    Ok(Array2::from_shape_vec((rows, width), values).expect("rows × width values"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhenotypeRecord {
    pub subject_id: String,
    pub site_id: String,
    pub label: usize,
}

pub fn parse_label(text: &str) -> Option<usize> {
    match text.trim().to_ascii_uppercase().as_str() {
        "ASD" | "1" => Some(ASD),
        "HC" | "0" => Some(HC),
        _ => None,
    }
}

pub fn label_name(label: usize) -> &'static str {
    if label == ASD {
        "ASD"
    } else {
        "HC"
    }
}

pub fn load_phenotype_csv(path: &Path) -> Result<Vec<PhenotypeRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| parse_err(path, 0, format!("missing `{name}` column")))
    };
    let (id_col, site_col, label_col) = (col("subject_id")?, col("site_id")?, col("label")?);
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let get = |c: usize| record.get(c).ok_or_else(|| parse_err(path, row, "missing column"));
        let label_text = get(label_col)?;
        let label = parse_label(label_text).ok_or_else(|| parse_err(path, row, format!("unknown label `{label_text}`")))?;
        out.push(PhenotypeRecord {
            subject_id: get(id_col)?.to_string(),
            site_id: get(site_col)?.to_string(),
            label,
        });
    }
    Ok(out)
}

/// Subjects present in only one of the two sources are dropped; the count is
/// returned alongside the loaded series.
#[derive(Debug)]
pub struct LoadedDataset {
    pub series: Vec<RoiTimeSeries>,
    pub dropped: usize,
}

/// Joins `<roi_dir>/<subject_id>.csv` files with the phenotype table.
pub fn load_dataset(roi_dir: &Path, phenotype: &Path) -> Result<LoadedDataset> {
    let records = load_phenotype_csv(phenotype)?;
    let mut files: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in fs::read_dir(roi_dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                files.insert(stem.to_string(), path);
            }
        }
    }
    let mut series = Vec::new();
    let mut dropped = 0;
    let mut matched = 0;
    for rec in &records {
        match files.get(&rec.subject_id) {
            Some(path) => {
                matched += 1;
                series.push(RoiTimeSeries {
                    subject_id: rec.subject_id.clone(),
                    site_id: rec.site_id.clone(),
                    series: load_roi_csv(path)?,
                    label: rec.label,
                });
            }
            None => dropped += 1,
        }
    }
    dropped += files.len() - matched.min(files.len());
    if dropped > 0 {
        log::warn!("dropped {dropped} subjects lacking either a series file or a phenotype row");
    }
    Ok(LoadedDataset { series, dropped })
}

pub fn write_roi_csv(series: &Array2<f64>, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record((0..series.ncols()).map(|i| format!("roi{i}")))?;
    for row in series.rows() {
        writer.write_record(row.iter().map(|v| format!("{v:e}")))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_phenotype_csv(series: &[RoiTimeSeries], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["subject_id", "site_id", "label"])?;
    for s in series {
        writer.write_record([s.subject_id.as_str(), s.site_id.as_str(), label_name(s.label)])?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes `series/<subject>.csv`, `phenotype.csv` and `informative_rois.csv`
/// under `dir`.
pub fn export_synthetic(dataset: &SynthDataset, dir: &Path) -> Result<()> {
    let series_dir = dir.join("series");
    fs::create_dir_all(&series_dir)?;
    for s in &dataset.series {
        write_roi_csv(&s.series, &series_dir.join(format!("{}.csv", s.subject_id)))?;
    }
    write_phenotype_csv(&dataset.series, &dir.join("phenotype.csv"))?;
    let mut writer = csv::Writer::from_path(dir.join("informative_rois.csv"))?;
    writer.write_record(["roi_index"])?;
    for roi in &dataset.informative_rois {
        writer.write_record([roi.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

/// Optional atlas labels: `roi_index,name` rows (header allowed).
pub fn load_atlas_labels(path: &Path) -> Result<BTreeMap<usize, String>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = BTreeMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let (Some(idx), Some(name)) = (record.get(0), record.get(1)) else {
            return Err(parse_err(path, line, "expected `roi_index,name`"));
        };
        match idx.parse::<usize>() {
            Ok(i) => {
                out.insert(i, name.to_string());
            }
            Err(_) if line == 0 => {}
            Err(_) => return Err(parse_err(path, line, format!("`{idx}` is not an ROI index"))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn reads_series_with_and_without_header() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "r0,r1,r2\n1,2,3\n4,5,6\n");
        let b = write(dir.path(), "b.csv", "1,2,3\n4,5,6\n");
        assert_eq!(load_roi_csv(&a).unwrap(), load_roi_csv(&b).unwrap());
        assert_eq!(load_roi_csv(&a).unwrap().dim(), (2, 3));
    }

    #[test]
    fn full_size_series() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::new();
        for t in 0..176 {
            let row: Vec<String> = (0..111).map(|r| format!("{}", (t * r) as f64 * 0.01)).collect();
            body.push_str(&row.join(","));
            body.push('\n');
        }
        let p = write(dir.path(), "s.csv", &body);
        assert_eq!(load_roi_csv(&p).unwrap().dim(), (176, 111));
    }

    #[test]
    fn ragged_row_names_its_index() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "bad.csv", "1,2,3\n4,5\n7,8,9\n");
        match load_roi_csv(&p) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
        let p = write(dir.path(), "nan.csv", "1,2\n3,x\n");
        assert!(matches!(load_roi_csv(&p), Err(Error::Parse { row: 1, .. })));
    }

    #[test]
    fn phenotype_labels_and_join() {
        let dir = tempfile::tempdir().unwrap();
        let pheno = write(
            dir.path(),
            "pheno.csv",
            "subject_id,site_id,label\ns1,NYU,HC\ns2,NYU,ASD\ns3,UM,1\ns4,UM,0\n",
        );
        let recs = load_phenotype_csv(&pheno).unwrap();
        assert_eq!(recs.iter().map(|r| r.label).collect::<Vec<_>>(), vec![HC, ASD, ASD, HC]);
        let series = dir.path().join("series");
        fs::create_dir(&series).unwrap();
        for s in ["s1", "s2", "s3", "extra"] {
            write(&series, &format!("{s}.csv"), "1,2\n3,4\n5,7\n");
        }
        let loaded = load_dataset(&series, &pheno).unwrap();
        assert_eq!(loaded.series.len(), 3);
        assert_eq!(loaded.dropped, 2);

        let bad = write(dir.path(), "bad.csv", "subject_id,site_id,label\ns1,NYU,maybe\n");
        assert!(matches!(load_phenotype_csv(&bad), Err(Error::Parse { row: 1, .. })));
    }

    #[test]
    fn synthetic_export_round_trips() {
        let cfg = crate::data::SynthConfig {
            n_sites: 2,
            subjects_per_class: 2,
            n_rois: 5,
            n_frames: 34,
            informative_roi_count: 2,
            ..Default::default()
        };
        let d = crate::data::synth_generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_synthetic(&d, dir.path()).unwrap();
        let loaded = load_dataset(&dir.path().join("series"), &dir.path().join("phenotype.csv")).unwrap();
        assert_eq!(loaded.dropped, 0);
        let mut expected = d.series.clone();
        expected.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        let mut got = loaded.series;
        got.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        // `{:e}` prints the shortest representation that round-trips
        assert_eq!(got, expected);
    }
}
