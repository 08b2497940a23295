use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::image::extension;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train = 0,
    Test = 1,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    /// Relative to the dataset root.
    pub path: String,
    pub class: String,
    pub plot: Option<String>,
    pub split: Split,
    #[serde(default)]
    pub date: Option<String>,
}

/// Validated list of labelled images. Class labels are positions in
/// `classes`, which is sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub classes: Vec<String>,
    pub records: Vec<Record>,
    labels: Vec<usize>,
}

impl DatasetIndex {
    /// Checks that every record names a known class and that no (class, plot)
    /// pair is used by both splits.
    pub fn new(mut classes: Vec<String>, records: Vec<Record>) -> Result<Self> {
        classes.sort();
        classes.dedup();
        let lookup: BTreeMap<&str, usize> = classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let mut labels = Vec::with_capacity(records.len());
        for r in &records {
            let &label = lookup.get(r.class.as_str()).ok_or_else(|| {
                Error::Dataset(format!("unknown class {:?} for {}", r.class, r.path))
            })?;
            labels.push(label);
        }
        let mut plots: BTreeMap<(&str, &str), BTreeSet<Split>> = BTreeMap::new();
        for r in &records {
            if let Some(p) = r.plot.as_deref() {
                let splits = plots.entry((r.class.as_str(), p)).or_default();
                splits.insert(r.split);
                if splits.len() > 1 {
                    return Err(Error::SplitLeakage {
                        class: r.class.clone(),
                        plot: p.to_string(),
                    });
                }
            }
        }
        drop(plots);
        Ok(DatasetIndex {
            classes,
            records,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn ids(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        let required = ["path", "class", "plot", "split"];
        if required.iter().any(|h| !headers.iter().any(|x| x == *h)) {
            return Err(Error::Format(format!(
                "{}: header must contain path,class,plot,split (got {})",
                path.display(),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let records = reader
            .deserialize::<Record>()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| csv_error(path, e))?;
        // Classes are defined by the training split; a test-only class is unknown.
        let classes: Vec<String> = records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.class.clone())
            .collect();
        DatasetIndex::new(classes, records)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let with_date = self.records.iter().any(|r| r.date.is_some());
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header = vec!["path", "class", "plot", "split"];
        if with_date {
            header.push("date");
        }
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for r in &self.records {
            let mut row = vec![
                r.path.as_str(),
                r.class.as_str(),
                r.plot.as_deref().unwrap_or(""),
                r.split.as_str(),
            ];
            if with_date {
                row.push(r.date.as_deref().unwrap_or(""));
            }
            w.write_record(&row).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

fn is_image(path: &Path) -> bool {
    matches!(extension(path).as_deref(), Some("png" | "spt4"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<fs::DirEntry>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    Ok(entries)
}

/// Builds an index for a dataset folder.
///
/// With a manifest (or an `index.csv` in `root`), records come from the CSV
/// and paths are relative to `root`. Otherwise the layout must be
/// `<split>/<class>/<image>`, with `split` one of `train` and `test`. Either
/// way every class must have training images and every file must exist.
pub fn ingest_folder(root: &Path, manifest: Option<&Path>) -> Result<DatasetIndex> {
    let default_manifest = root.join(super::INDEX_FILE);
    let manifest = manifest.or_else(|| {
        default_manifest
            .exists()
            .then_some(default_manifest.as_path())
    });
    let index = match manifest {
        Some(m) => DatasetIndex::read_csv(m)?,
        None => scan_layout(root)?,
    };
    for r in &index.records {
        let p = root.join(&r.path);
        if !p.is_file() {
            return Err(Error::Dataset(format!("missing image {}", p.display())));
        }
        if !is_image(&p) {
            return Err(Error::Dataset(format!(
                "{} is not a .png or .spt4 file",
                p.display()
            )));
        }
    }
    Ok(index)
}

fn scan_layout(root: &Path) -> Result<DatasetIndex> {
    let mut records = Vec::new();
    let mut train_classes = Vec::new();
    for split in [Split::Train, Split::Test] {
        let dir = root.join(split.as_str());
        if !dir.is_dir() {
            return Err(Error::Dataset(format!(
                "{} has no {} directory",
                root.display(),
                split.as_str()
            )));
        }
        for class_dir in sorted_entries(&dir)? {
            if !class_dir.path().is_dir() {
                continue;
            }
            let class = class_dir.file_name().to_string_lossy().into_owned();
            if split == Split::Train {
                train_classes.push(class.clone());
            }
            for file in sorted_entries(&class_dir.path())? {
                let path = file.path();
                if path.is_file() && is_image(&path) {
                    records.push(Record {
                        path: format!(
                            "{}/{class}/{}",
                            split.as_str(),
                            file.file_name().to_string_lossy()
                        ),
                        class: class.clone(),
                        plot: None,
                        split,
                        date: None,
                    });
                }
            }
        }
    }
    DatasetIndex::new(train_classes, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(class: &str, plot: &str, split: Split) -> Record {
        Record {
            path: format!("{class}-{plot}.png"),
            class: class.into(),
            plot: Some(plot.into()),
            split,
            date: None,
        }
    }

    #[test]
    fn shared_plot_is_leakage() {
        let err = DatasetIndex::new(
            vec!["x".into()],
            vec![rec("x", "A", Split::Train), rec("x", "A", Split::Test)],
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::SplitLeakage { ref class, ref plot } if class == "x" && plot == "A")
        );
    }

    #[test]
    fn disjoint_plots_are_fine() {
        let idx = DatasetIndex::new(
            vec!["y".into(), "x".into()],
            vec![
                rec("x", "A", Split::Train),
                rec("x", "B", Split::Test),
                rec("y", "A", Split::Test),
            ],
        )
        .unwrap();
        assert_eq!(idx.classes, vec!["x", "y"]);
        assert_eq!(idx.label(2), 1);
        assert_eq!(idx.ids(Split::Test), vec![1, 2]);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.csv");
        let mut r = rec("x", "A", Split::Train);
        r.date = Some("2017-06-01".into());
        let idx = DatasetIndex::new(vec!["x".into()], vec![r, rec("x", "B", Split::Test)]).unwrap();
        idx.write_csv(&path).unwrap();
        assert!(fs::read_to_string(&path)
            .unwrap()
            .starts_with("path,class,plot,split,date\n"));
        assert_eq!(DatasetIndex::read_csv(&path).unwrap(), idx);
    }

    #[test]
    fn empty_plot_reads_as_none() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.csv");
        fs::write(
            &path,
            "path,class,plot,split\na.png,x,,train\nb.png,x,,test\n",
        )
        .unwrap();
        let idx = DatasetIndex::read_csv(&path).unwrap();
        assert!(idx.records.iter().all(|r| r.plot.is_none()));
    }

    #[test]
    fn test_only_class_is_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.csv");
        fs::write(
            &path,
            "path,class,plot,split\na.png,x,,train\nb.png,z,,test\n",
        )
        .unwrap();
        assert!(
            matches!(DatasetIndex::read_csv(&path), Err(Error::Dataset(m)) if m.contains("\"z\""))
        );
    }

    #[test]
    fn bad_header_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.csv");
        fs::write(&path, "file,label\na.png,x\n").unwrap();
        assert!(matches!(
            DatasetIndex::read_csv(&path),
            Err(Error::Format(_))
        ));
    }
}
