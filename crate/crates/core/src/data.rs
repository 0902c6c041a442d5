//! Datasets and the shard → chunk → slice partition hierarchy.
//!
//! Point identity is a stable integer id. A point that appears in both the
//! teacher and the student dataset (shared-data configurations) is the same
//! point exactly when the ids are equal.

use std::collections::HashMap;
use std::io::Read;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{seed, Error, Result};

pub type PointId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub id: PointId,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "DatasetRepr", into = "DatasetRepr")]
pub struct Dataset {
    points: Vec<Point>,
    num_classes: usize,
    feature_dim: usize,
    index: HashMap<PointId, usize>,
}

#[derive(Serialize, Deserialize)]
struct DatasetRepr {
    num_classes: usize,
    feature_dim: usize,
    points: Vec<Point>,
}

impl TryFrom<DatasetRepr> for Dataset {
    type Error = Error;

    fn try_from(r: DatasetRepr) -> Result<Self> {
        Dataset::new(r.points, r.num_classes, r.feature_dim)
    }
}

impl From<Dataset> for DatasetRepr {
    fn from(d: Dataset) -> Self {
        DatasetRepr {
            num_classes: d.num_classes,
            feature_dim: d.feature_dim,
            points: d.points,
        }
    }
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.num_classes == other.num_classes
            && self.feature_dim == other.feature_dim
            && self.points == other.points
    }
}

impl Dataset {
    pub fn new(points: Vec<Point>, num_classes: usize, feature_dim: usize) -> Result<Self> {
        if num_classes == 0 || feature_dim == 0 {
            return Err(Error::InvalidArgument(
                "num_classes and feature_dim must be positive".into(),
            ));
        }
        let mut index = HashMap::with_capacity(points.len());
        for (pos, p) in points.iter().enumerate() {
            if p.features.len() != feature_dim {
                return Err(Error::Dimension {
                    expected: feature_dim,
                    found: p.features.len(),
                });
            }
            if p.label >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "point {} has label {} but num_classes is {}",
                    p.id, p.label, num_classes
                )));
            }
            if index.insert(p.id, pos).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate point id {}", p.id)));
            }
        }
        Ok(Dataset {
            points,
            num_classes,
            feature_dim,
            index,
        })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn get(&self, id: PointId) -> Option<&Point> {
        self.index.get(&id).map(|&i| &self.points[i])
    }

    pub fn point(&self, id: PointId) -> Result<&Point> {
        self.get(id)
            .ok_or_else(|| Error::NotFound(format!("point {id} is not in the dataset")))
    }

    pub fn contains(&self, id: PointId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = PointId> + '_ {
        self.points.iter().map(|p| p.id)
    }
}

/// Gaussian-blob classification data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub points_per_class: usize,
    pub feature_dim: usize,
    pub class_center_spread: f64,
    pub within_class_stddev: f64,
    pub seed: u64,
    /// First point id; lets distinct datasets use disjoint id ranges.
    #[serde(default)]
    pub id_offset: u64,
}

impl SyntheticSpec {
    pub fn new(
        num_classes: usize,
        points_per_class: usize,
        feature_dim: usize,
        class_center_spread: f64,
        within_class_stddev: f64,
        seed: u64,
    ) -> Self {
        SyntheticSpec {
            num_classes,
            points_per_class,
            feature_dim,
            class_center_spread,
            within_class_stddev,
            seed,
            id_offset: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.points_per_class == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidArgument(
                "synthetic spec counts must be positive".into(),
            ));
        }
        if !(self.within_class_stddev > 0.0) || !self.class_center_spread.is_finite() {
            return Err(Error::InvalidArgument(
                "within_class_stddev must be > 0 and spread finite".into(),
            ));
        }
        Ok(())
    }

    /// Class centres: evenly spaced on a circle of radius `spread` in the
    /// first two coordinates, or evenly spaced on a line when `feature_dim`
    /// is 1.
    pub fn class_center(&self, class: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.feature_dim];
        if self.feature_dim == 1 {
            c[0] = self.class_center_spread * (class as f64 - (self.num_classes as f64 - 1.0) / 2.0);
        } else {
            let angle = std::f64::consts::TAU * class as f64 / self.num_classes as f64;
            c[0] = self.class_center_spread * angle.cos();
            c[1] = self.class_center_spread * angle.sin();
        }
        c
    }
}

/// Point `i` belongs to class `i % num_classes`, so classes are balanced in
/// every prefix. Ids run from `id_offset` upwards.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed);
    let noise = Normal::new(0.0, spec.within_class_stddev)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let centers: Vec<Vec<f64>> = (0..spec.num_classes).map(|c| spec.class_center(c)).collect();
    let n = spec.num_classes * spec.points_per_class;
    let points = (0..n)
        .map(|i| {
            let label = i % spec.num_classes;
            let features = centers[label]
                .iter()
                .map(|&mu| mu + noise.sample(&mut rng))
                .collect();
            Point {
                id: spec.id_offset + i as u64,
                features,
                label,
            }
        })
        .collect();
    Dataset::new(points, spec.num_classes, spec.feature_dim)
}

/// Reads rows of `id,label,f1,...,fd`.
pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, has_header)
}

pub fn read_csv<R: Read>(reader: R, has_header: bool) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut points = Vec::new();
    let mut dim: Option<usize> = None;
    for (row, record) in rdr.records().enumerate() {
        let fallback_line = row as u64 + 1 + u64::from(has_header);
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(fallback_line, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(fallback_line, |p| p.line());
        let parse_err = |message: String| Error::Parse { line, message };
        if record.len() < 3 {
            return Err(parse_err(format!(
                "expected at least 3 fields (id,label,f1), found {}",
                record.len()
            )));
        }
        let id: PointId = record[0]
            .parse()
            .map_err(|e| parse_err(format!("bad id {:?}: {e}", &record[0])))?;
        let label: usize = record[1]
            .parse()
            .map_err(|e| parse_err(format!("bad label {:?}: {e}", &record[1])))?;
        let features = record
            .iter()
            .skip(2)
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| parse_err(format!("bad feature {f:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        match dim {
            None => dim = Some(features.len()),
            Some(d) if d != features.len() => {
                return Err(Error::Dimension {
                    expected: d,
                    found: features.len(),
                })
            }
            _ => {}
        }
        points.push(Point { id, features, label });
    }
    let Some(feature_dim) = dim else {
        return Err(Error::Parse {
            line: 1,
            message: "no data rows".into(),
        });
    };
    let num_classes = 1 + points.iter().map(|p| p.label).max().unwrap_or(0);
    Dataset::new(points, num_classes, feature_dim)
}

pub fn write_csv<W: std::io::Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| Error::InvalidArgument(format!("csv write failed: {e}"));
    for p in dataset.points() {
        let mut row = vec![p.id.to_string(), p.label.to_string()];
        row.extend(p.features.iter().map(|f| format!("{f:?}")));
        w.write_record(&row).map_err(to_err)?;
    }
    w.flush()
        .map_err(|e| Error::InvalidArgument(format!("csv write failed: {e}")))
}

/// Position of a point inside a [`PartitionPlan`]. All indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Location {
    pub shard: usize,
    pub chunk: usize,
    pub slice: usize,
}

/// Group counts for each level of the hierarchy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub chunks_per_shard: Vec<usize>,
    pub slices_per_chunk: Vec<Vec<usize>>,
}

impl Layout {
    /// `shards` shards, each with `chunks` chunks of `slices` slices.
    pub fn uniform(shards: usize, chunks: usize, slices: usize) -> Self {
        Layout {
            chunks_per_shard: vec![chunks; shards],
            slices_per_chunk: vec![vec![slices; chunks]; shards],
        }
    }

    /// Chunk counts given per shard, `slices` slices in every chunk.
    pub fn with_chunks(chunks_per_shard: &[usize], slices: usize) -> Self {
        Layout {
            chunks_per_shard: chunks_per_shard.to_vec(),
            slices_per_chunk: chunks_per_shard.iter().map(|&c| vec![slices; c]).collect(),
        }
    }

    pub fn shards(&self) -> usize {
        self.chunks_per_shard.len()
    }
}

/// Three-level partition of point ids. `shards[k][l][j]` is the ordered
/// list of ids in slice `j` of chunk `l` of shard `k`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "PlanRepr", into = "PlanRepr")]
pub struct PartitionPlan {
    shards: Vec<Vec<Vec<Vec<PointId>>>>,
    seed: u64,
    index: HashMap<PointId, Location>,
}

#[derive(Serialize, Deserialize)]
struct PlanRepr {
    seed: u64,
    shards: Vec<Vec<Vec<Vec<PointId>>>>,
}

impl From<PlanRepr> for PartitionPlan {
    fn from(r: PlanRepr) -> Self {
        PartitionPlan::from_groups(r.shards, r.seed)
    }
}

impl From<PartitionPlan> for PlanRepr {
    fn from(p: PartitionPlan) -> Self {
        PlanRepr {
            seed: p.seed,
            shards: p.shards,
        }
    }
}

impl PartialEq for PartitionPlan {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed && self.shards == other.shards
    }
}

/// Contiguous ranges splitting `len` items into `parts` groups whose sizes
/// differ by at most one; the first `len % parts` groups get the extra item.
pub fn even_split(len: usize, parts: usize) -> Vec<Range<usize>> {
    let base = len / parts;
    let extra = len % parts;
    let mut start = 0;
    (0..parts)
        .map(|g| {
            let size = base + usize::from(g < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect()
}

pub fn make_partition(dataset: &Dataset, layout: &Layout, seed: u64) -> Result<PartitionPlan> {
    PartitionPlan::from_ids(dataset.ids().collect(), layout, seed)
}

impl PartitionPlan {
    /// Uniform random partition: the ids are sorted, shuffled with `seed`,
    /// then split evenly into shards, chunks and slices in turn.
    pub fn from_ids(mut ids: Vec<PointId>, layout: &Layout, seed: u64) -> Result<Self> {
        let n_shards = layout.shards();
        if n_shards == 0 {
            return Err(Error::Partition("need at least one shard".into()));
        }
        if layout.slices_per_chunk.len() != n_shards {
            return Err(Error::Partition(format!(
                "slice counts given for {} shards, expected {n_shards}",
                layout.slices_per_chunk.len()
            )));
        }
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Partition("duplicate point ids".into()));
        }
        ids.shuffle(&mut seed::rng(seed));
        if n_shards > ids.len() {
            return Err(Error::Partition(format!(
                "{n_shards} shards requested for {} points",
                ids.len()
            )));
        }
        let mut shards = Vec::with_capacity(n_shards);
        for (k, shard_range) in even_split(ids.len(), n_shards).into_iter().enumerate() {
            let shard = &ids[shard_range];
            let c = layout.chunks_per_shard[k];
            if c == 0 || c > shard.len() {
                return Err(Error::Partition(format!(
                    "shard {k} has {} points and cannot hold {c} chunks",
                    shard.len()
                )));
            }
            if layout.slices_per_chunk[k].len() != c {
                return Err(Error::Partition(format!(
                    "shard {k}: {} slice counts for {c} chunks",
                    layout.slices_per_chunk[k].len()
                )));
            }
            let mut chunks = Vec::with_capacity(c);
            for (l, chunk_range) in even_split(shard.len(), c).into_iter().enumerate() {
                let chunk = &shard[chunk_range];
                let r = layout.slices_per_chunk[k][l];
                if r == 0 || r > chunk.len() {
                    return Err(Error::Partition(format!(
                        "chunk ({k},{l}) has {} points and cannot hold {r} slices",
                        chunk.len()
                    )));
                }
                let slices = even_split(chunk.len(), r)
                    .into_iter()
                    .map(|sr| chunk[sr].to_vec())
                    .collect();
                chunks.push(slices);
            }
            shards.push(chunks);
        }
        Ok(PartitionPlan::from_groups(shards, seed))
    }

    fn from_groups(shards: Vec<Vec<Vec<Vec<PointId>>>>, seed: u64) -> Self {
        let mut index = HashMap::new();
        for (k, chunks) in shards.iter().enumerate() {
            for (l, slices) in chunks.iter().enumerate() {
                for (j, slice) in slices.iter().enumerate() {
                    for &id in slice {
                        index.insert(id, Location { shard: k, chunk: l, slice: j });
                    }
                }
            }
        }
        PartitionPlan { shards, seed, index }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_shards(&self) -> usize {
        self.shards.len()
    }

    pub fn num_chunks(&self, shard: usize) -> usize {
        self.shards[shard].len()
    }

    pub fn num_slices(&self, shard: usize, chunk: usize) -> usize {
        self.shards[shard][chunk].len()
    }

    /// Total slices in a shard, summed over its chunks.
    pub fn total_slices(&self, shard: usize) -> usize {
        self.shards[shard].iter().map(Vec::len).sum()
    }

    pub fn slice(&self, shard: usize, chunk: usize, slice: usize) -> &[PointId] {
        &self.shards[shard][chunk][slice]
    }

    pub fn slices(&self, shard: usize, chunk: usize) -> &[Vec<PointId>] {
        &self.shards[shard][chunk]
    }

    pub fn chunk_ids(&self, shard: usize, chunk: usize) -> impl Iterator<Item = PointId> + '_ {
        self.shards[shard][chunk].iter().flatten().copied()
    }

    pub fn shard_ids(&self, shard: usize) -> impl Iterator<Item = PointId> + '_ {
        self.shards[shard].iter().flatten().flatten().copied()
    }

    pub fn shard_len(&self, shard: usize) -> usize {
        self.shards[shard].iter().flatten().map(Vec::len).sum()
    }

    pub fn chunk_len(&self, shard: usize, chunk: usize) -> usize {
        self.shards[shard][chunk].iter().map(Vec::len).sum()
    }

    pub fn all_ids(&self) -> impl Iterator<Item = PointId> + '_ {
        self.shards.iter().flatten().flatten().flatten().copied()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, id: PointId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn locate(&self, id: PointId) -> Result<Location> {
        self.index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::NotFound(format!("point {id} is not in the partition")))
    }

    /// Removes `id` from its slice; every other group is left untouched.
    pub fn remove_point(&mut self, id: PointId) -> Result<Location> {
        let loc = self.locate(id)?;
        let slice = &mut self.shards[loc.shard][loc.chunk][loc.slice];
        let pos = slice
            .iter()
            .position(|&p| p == id)
            .expect("index and groups agree");
        slice.remove(pos);
        self.index.remove(&id);
        Ok(loc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn ids_dataset(n: usize) -> Dataset {
        let points = (0..n)
            .map(|i| Point {
                id: i as u64,
                features: vec![i as f64],
                label: 0,
            })
            .collect();
        Dataset::new(points, 1, 1).unwrap()
    }

    #[test]
    fn synthetic_counts_and_ids() {
        let d = gen_synthetic(&SyntheticSpec::new(3, 10, 2, 3.0, 1.0, 7)).unwrap();
        assert_eq!(d.len(), 30);
        assert_eq!(d.ids().collect::<Vec<_>>(), (0..30).collect::<Vec<_>>());
        assert!(d.points().iter().all(|p| p.features.len() == 2 && p.label < 3));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec::new(3, 10, 2, 3.0, 1.0, 7);
        let a = gen_synthetic(&spec).unwrap();
        let b = gen_synthetic(&spec).unwrap();
        let bits = |d: &Dataset| {
            d.points()
                .iter()
                .flat_map(|p| p.features.iter().map(|f| f.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_rejects_bad_spec() {
        assert!(gen_synthetic(&SyntheticSpec::new(0, 10, 2, 3.0, 1.0, 7)).is_err());
        assert!(gen_synthetic(&SyntheticSpec::new(2, 10, 2, 3.0, 0.0, 7)).is_err());
    }

    #[test]
    fn csv_three_rows() {
        let d = read_csv("0,0,1.0,2.0\n1,1,3.0,4.0\n2,0,5.5,-1e3\n".as_bytes(), false).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.feature_dim(), 2);
        assert_eq!(d.get(2).unwrap().features, vec![5.5, -1000.0]);
    }

    #[test]
    fn csv_header_is_skipped() {
        let d = read_csv("id,label,x\n5,1,0.5\n".as_bytes(), true).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.num_classes(), 2);
    }

    #[test]
    fn csv_empty_is_parse_error() {
        assert!(matches!(read_csv("".as_bytes(), false), Err(Error::Parse { .. })));
    }

    #[test]
    fn csv_label_gap_sets_num_classes() {
        let d = read_csv("0,0,1.0\n1,2,1.0\n".as_bytes(), false).unwrap();
        assert_eq!(d.num_classes(), 3);
    }

    #[test]
    fn csv_malformed_row_names_line() {
        let err = read_csv("0,0,1.0\n1,x,1.0\n".as_bytes(), false).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let err = read_csv("id,label,f\n0,0,1.0\n1,1,zz\n".as_bytes(), true).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn csv_inconsistent_dimension() {
        let err = read_csv("0,0,1.0,2.0\n1,1,3.0\n".as_bytes(), false).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 2, found: 1 }));
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let d = gen_synthetic(&SyntheticSpec::new(2, 5, 3, 2.0, 0.7, 1)).unwrap();
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        assert_eq!(read_csv(buf.as_slice(), false).unwrap(), d);
    }

    #[test]
    fn two_even_shards() {
        let d = ids_dataset(30);
        let plan = make_partition(&d, &Layout::uniform(2, 1, 1), 3).unwrap();
        assert_eq!(plan.shard_len(0), 15);
        assert_eq!(plan.shard_len(1), 15);
        let all: BTreeSet<_> = plan.all_ids().collect();
        assert_eq!(all, d.ids().collect());
    }

    #[test]
    fn chunks_of_four() {
        let plan = make_partition(&ids_dataset(32), &Layout::uniform(4, 2, 1), 9).unwrap();
        for k in 0..4 {
            for l in 0..2 {
                assert_eq!(plan.chunk_len(k, l), 4);
            }
        }
    }

    #[test]
    fn partition_is_deterministic() {
        let d = ids_dataset(57);
        let layout = Layout::uniform(3, 2, 3);
        assert_eq!(
            make_partition(&d, &layout, 11).unwrap(),
            make_partition(&d, &layout, 11).unwrap()
        );
        assert_ne!(
            make_partition(&d, &layout, 11).unwrap(),
            make_partition(&d, &layout, 12).unwrap()
        );
    }

    #[test]
    fn remainder_goes_to_lowest_groups() {
        assert_eq!(even_split(10, 3), vec![0..4, 4..7, 7..10]);
        let plan = make_partition(&ids_dataset(10), &Layout::uniform(3, 1, 1), 0).unwrap();
        assert_eq!(
            (0..3).map(|k| plan.shard_len(k)).collect::<Vec<_>>(),
            vec![4, 3, 3]
        );
    }

    #[test]
    fn too_many_groups_is_partition_error() {
        let d = ids_dataset(4);
        assert!(matches!(
            make_partition(&d, &Layout::uniform(5, 1, 1), 0),
            Err(Error::Partition(_))
        ));
        assert!(matches!(
            make_partition(&d, &Layout::uniform(2, 3, 1), 0),
            Err(Error::Partition(_))
        ));
        assert!(matches!(
            make_partition(&d, &Layout::uniform(2, 1, 3), 0),
            Err(Error::Partition(_))
        ));
    }

    #[test]
    fn locate_matches_construction() {
        let plan = PartitionPlan::from_groups(
            vec![
                vec![vec![vec![0, 1]]],
                vec![vec![vec![2]], vec![vec![3]], vec![vec![4], vec![5, 6]]],
            ],
            0,
        );
        assert_eq!(
            plan.locate(5).unwrap(),
            Location { shard: 1, chunk: 2, slice: 1 }
        );
    }

    #[test]
    fn locate_agrees_with_exhaustive_scan() {
        let plan = make_partition(&ids_dataset(100), &Layout::uniform(3, 2, 3), 5).unwrap();
        for id in 0..100u64 {
            let mut found = Vec::new();
            for k in 0..plan.num_shards() {
                for l in 0..plan.num_chunks(k) {
                    for j in 0..plan.num_slices(k, l) {
                        if plan.slice(k, l, j).contains(&id) {
                            found.push(Location { shard: k, chunk: l, slice: j });
                        }
                    }
                }
            }
            assert_eq!(found, vec![plan.locate(id).unwrap()]);
        }
    }

    #[test]
    fn remove_then_locate_fails() {
        let mut plan = make_partition(&ids_dataset(20), &Layout::uniform(2, 2, 2), 1).unwrap();
        let loc = plan.locate(7).unwrap();
        let slice_before = plan.slice(loc.shard, loc.chunk, loc.slice).len();
        let shard_before = plan.shard_len(loc.shard);
        plan.remove_point(7).unwrap();
        assert!(matches!(plan.locate(7), Err(Error::NotFound(_))));
        assert!(matches!(plan.remove_point(7), Err(Error::NotFound(_))));
        assert_eq!(plan.slice(loc.shard, loc.chunk, loc.slice).len(), slice_before - 1);
        assert_eq!(plan.shard_len(loc.shard), shard_before - 1);
        let remaining: BTreeSet<_> = plan.all_ids().collect();
        let expected: BTreeSet<_> = (0..20).filter(|&i| i != 7).collect();
        assert_eq!(remaining, expected);
    }

    #[test]
    fn plan_repr_roundtrip_rebuilds_index() {
        let plan = make_partition(&ids_dataset(20), &Layout::uniform(2, 2, 2), 1).unwrap();
        let back = PartitionPlan::from(PlanRepr::from(plan.clone()));
        assert_eq!(back, plan);
        for id in 0..20 {
            assert_eq!(back.locate(id).unwrap(), plan.locate(id).unwrap());
        }
    }

    fn check_invariants(plan: &PartitionPlan, expected: &BTreeSet<PointId>) {
        let mut seen = BTreeSet::new();
        for k in 0..plan.num_shards() {
            for l in 0..plan.num_chunks(k) {
                for j in 0..plan.num_slices(k, l) {
                    for &id in plan.slice(k, l, j) {
                        assert!(seen.insert(id), "id {id} appears twice");
                        assert_eq!(plan.locate(id).unwrap(), Location { shard: k, chunk: l, slice: j });
                    }
                }
            }
        }
        assert_eq!(&seen, expected);
        assert_eq!(plan.len(), expected.len());
    }

    proptest! {
        #[test]
        fn disjoint_cover_survives_removals(
            n in 24usize..120,
            shards in 1usize..4,
            chunks in 1usize..3,
            slices in 1usize..3,
            seed in any::<u64>(),
            removals in proptest::collection::vec(any::<prop::sample::Index>(), 0..20),
        ) {
            let d = ids_dataset(n);
            let mut plan = make_partition(&d, &Layout::uniform(shards, chunks, slices), seed).unwrap();
            let mut expected: BTreeSet<PointId> = d.ids().collect();
            check_invariants(&plan, &expected);
            for ix in removals {
                let live: Vec<_> = expected.iter().copied().collect();
                let id = live[ix.index(live.len())];
                plan.remove_point(id).unwrap();
                expected.remove(&id);
                check_invariants(&plan, &expected);
            }
        }

        #[test]
        fn group_sizes_differ_by_at_most_one(
            n in 30usize..200,
            shards in 1usize..5,
            chunks in 1usize..4,
            slices in 1usize..3,
            seed in any::<u64>(),
        ) {
            let plan = make_partition(&ids_dataset(n), &Layout::uniform(shards, chunks, slices), seed).unwrap();
            let spread = |v: Vec<usize>| v.iter().max().unwrap() - v.iter().min().unwrap();
            prop_assert!(spread((0..shards).map(|k| plan.shard_len(k)).collect()) <= 1);
            for k in 0..shards {
                prop_assert!(spread((0..chunks).map(|l| plan.chunk_len(k, l)).collect()) <= 1);
                for l in 0..chunks {
                    prop_assert!(spread(plan.slices(k, l).iter().map(Vec::len).collect()) <= 1);
                }
            }
        }
    }
}
