//! File formats: edge lists, features, labels, masks, partition files, and
//! parameter checkpoints.
//!
//! - Edge list: text, one `u v` pair per line, 0-based, whitespace-separated,
//!   `#` starts a comment line. Each undirected edge may appear once; the
//!   loader stores the symmetric closure.
//! - Features: CSV (`.csv`, no header, one node per row) or raw binary
//!   (anything else): an 8-byte header of two little-endian u32s `(n, dim)`
//!   followed by `n * dim` little-endian 32-bit floats.
//! - Labels: CSV `node_id,class`, or positional one-class-per-line.
//! - Masks (optional sidecar): one of `train`/`val`/`test` per line.
//! - Partition file: `n` lines, one worker id each; the worker count is
//!   inferred as the largest id plus one.
//! - Checkpoint: magic `VRCO`, u32 version, u32 layer count, u32 tap count,
//!   the dims as u32s, then row-major 64-bit floats per matrix in layer
//!   order (all integers and floats little-endian).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{clamp_feature_norms, split_masks, Graph};
use crate::mat::Mat;
use crate::model::ModelParams;
use crate::partition::Partition;

/// Seed of the 60/20/20 split derived when no mask file is supplied.
pub const DEFAULT_SPLIT_SEED: u64 = 0x5EED;

const CHECKPOINT_MAGIC: &[u8; 4] = b"VRCO";
const CHECKPOINT_VERSION: u32 = 1;

fn display(path: &Path) -> String {
    path.display().to_string()
}

/// Parse an edge list; node ids must be below `n`.
pub fn read_edge_list(path: &Path, n: usize) -> Result<Vec<(u32, u32)>> {
    let file = File::open(path)?;
    let mut edges = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line_num = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let (u, v) = match (parts.next(), parts.next(), parts.next()) {
            (Some(u), Some(v), None) => (u, v),
            _ => {
                return Err(Error::format(
                    display(path),
                    line_num,
                    format!("expected 'u v', got {trimmed:?}"),
                ))
            }
        };
        let parse = |s: &str| -> Result<u32> {
            s.parse().map_err(|_| {
                Error::format(display(path), line_num, format!("bad node id {s:?}"))
            })
        };
        let (u, v) = (parse(u)?, parse(v)?);
        for id in [u, v] {
            if id as usize >= n {
                return Err(Error::format(
                    display(path),
                    line_num,
                    format!("node id {id} out of range for {n} nodes"),
                ));
            }
        }
        edges.push((u, v));
    }
    Ok(edges)
}

pub fn write_edge_list(path: &Path, g: &Graph) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# undirected edge list, one 'u v' per line")?;
    for u in 0..g.num_nodes() {
        for &v in g.neighbors(u) {
            if (v as usize) > u {
                writeln!(w, "{u} {v}")?;
            }
        }
    }
    Ok(())
}

/// Features from CSV (`.csv`) or the raw binary layout (any other extension).
pub fn read_features(path: &Path) -> Result<Mat> {
    if path.extension().and_then(|e| e.to_str()) == Some("csv") {
        read_features_csv(path)
    } else {
        read_features_bin(path)
    }
}

fn read_features_csv(path: &Path) -> Result<Mat> {
    let file = File::open(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line_num = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut row = Vec::new();
        for field in trimmed.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::format(display(path), line_num, format!("bad float {field:?}"))
            })?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::format(
                    display(path),
                    line_num,
                    format!("row has {} fields, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::format(display(path), 1, "no feature rows"));
    }
    Mat::from_rows(&rows)
}

fn read_features_bin(path: &Path) -> Result<Mat> {
    let mut file = File::open(path)?;
    let mut header = [0u8; 8];
    file.read_exact(&mut header)?;
    let n = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; n * dim * 4];
    file.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Mat::from_vec(n, dim, data)
}

pub fn write_features_csv(path: &Path, features: &Mat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for i in 0..features.rows() {
        let row = features.row(i);
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn write_features_bin(path: &Path, features: &Mat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(features.rows() as u32).to_le_bytes())?;
    w.write_all(&(features.cols() as u32).to_le_bytes())?;
    for &v in features.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Labels as `node_id,class` CSV or positional one-per-line; the first
/// non-comment line decides which form the file uses.
pub fn read_labels(path: &Path, n: usize) -> Result<Vec<u32>> {
    let file = File::open(path)?;
    let mut labels: Vec<Option<u32>> = vec![None; n];
    let mut positional_next = 0usize;
    let mut format: Option<bool> = None; // true = id,class
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line_num = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let with_id = *format.get_or_insert_with(|| trimmed.contains(','));
        let (node, class_str) = if with_id {
            let mut parts = trimmed.splitn(2, ',');
            let id_str = parts.next().unwrap().trim();
            let class_str = parts.next().ok_or_else(|| {
                Error::format(display(path), line_num, "expected 'node_id,class'")
            })?;
            let id: usize = id_str.parse().map_err(|_| {
                Error::format(display(path), line_num, format!("bad node id {id_str:?}"))
            })?;
            (id, class_str.trim())
        } else {
            let node = positional_next;
            positional_next += 1;
            (node, trimmed)
        };
        if node >= n {
            return Err(Error::format(
                display(path),
                line_num,
                format!("node id {node} out of range for {n} nodes"),
            ));
        }
        let class: u32 = class_str.parse().map_err(|_| {
            Error::format(display(path), line_num, format!("bad class {class_str:?}"))
        })?;
        if labels[node].replace(class).is_some() {
            return Err(Error::format(
                display(path),
                line_num,
                format!("node {node} labeled twice"),
            ));
        }
    }
    let mut out = Vec::with_capacity(n);
    for (i, l) in labels.into_iter().enumerate() {
        out.push(l.ok_or_else(|| {
            Error::format(display(path), 0, format!("node {i} has no label"))
        })?);
    }
    Ok(out)
}

pub fn write_labels_csv(path: &Path, labels: &[u32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (i, c) in labels.iter().enumerate() {
        writeln!(w, "{i},{c}")?;
    }
    Ok(())
}

/// Mask sidecar: one of `train`, `val`, `test` per line.
pub fn read_masks(path: &Path, n: usize) -> Result<(Vec<bool>, Vec<bool>, Vec<bool>)> {
    let file = File::open(path)?;
    let mut train = vec![false; n];
    let mut val = vec![false; n];
    let mut test = vec![false; n];
    let mut node = 0usize;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line_num = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if node >= n {
            return Err(Error::format(display(path), line_num, "more lines than nodes"));
        }
        match trimmed {
            "train" => train[node] = true,
            "val" => val[node] = true,
            "test" => test[node] = true,
            other => {
                return Err(Error::format(
                    display(path),
                    line_num,
                    format!("expected train/val/test, got {other:?}"),
                ))
            }
        }
        node += 1;
    }
    if node != n {
        return Err(Error::format(
            display(path),
            node + 1,
            format!("{node} mask lines for {n} nodes"),
        ));
    }
    Ok((train, val, test))
}

pub fn write_masks(path: &Path, g: &Graph) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for i in 0..g.num_nodes() {
        let role = if g.train_mask()[i] {
            "train"
        } else if g.val_mask()[i] {
            "val"
        } else {
            "test"
        };
        writeln!(w, "{role}")?;
    }
    Ok(())
}

/// Load a graph from its three files. The node count comes from the feature
/// file; features are norm-clamped at ingest and the symmetric closure of
/// the edge list is stored. Without a mask file the 60/20/20 split is
/// derived deterministically from [`DEFAULT_SPLIT_SEED`].
pub fn load_graph(edge_path: &Path, feature_path: &Path, label_path: &Path) -> Result<Graph> {
    load_graph_impl(edge_path, feature_path, label_path, None)
}

/// [`load_graph`] with an explicit mask sidecar.
pub fn load_graph_with_masks(
    edge_path: &Path,
    feature_path: &Path,
    label_path: &Path,
    mask_path: &Path,
) -> Result<Graph> {
    load_graph_impl(edge_path, feature_path, label_path, Some(mask_path))
}

fn load_graph_impl(
    edge_path: &Path,
    feature_path: &Path,
    label_path: &Path,
    mask_path: Option<&Path>,
) -> Result<Graph> {
    let mut features = read_features(feature_path)?;
    clamp_feature_norms(&mut features);
    let n = features.rows();
    let edges = read_edge_list(edge_path, n)?;
    let labels = read_labels(label_path, n)?;
    let num_classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let (train, val, test) = match mask_path {
        Some(p) => read_masks(p, n)?,
        None => split_masks(n, DEFAULT_SPLIT_SEED),
    };
    let (row_offsets, col_indices) = Graph::csr_from_undirected(n, &edges);
    Graph::new(
        n,
        row_offsets,
        col_indices,
        features,
        labels,
        num_classes,
        train,
        val,
        test,
    )
}

/// Read a partition file (`n` lines of worker ids) computed elsewhere, e.g.
/// by an external min-cut partitioner. The worker count is the largest id
/// plus one.
pub fn import_partition(g: &Graph, path: &Path) -> Result<Partition> {
    let file = File::open(path)?;
    let n = g.num_nodes();
    let mut owner = Vec::with_capacity(n);
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line_num = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if owner.len() >= n {
            return Err(Error::format(
                display(path),
                line_num,
                format!("more than {n} assignment lines"),
            ));
        }
        let id: u32 = trimmed.parse().map_err(|_| {
            Error::format(display(path), line_num, format!("bad worker id {trimmed:?}"))
        })?;
        owner.push(id);
    }
    if owner.len() != n {
        return Err(Error::format(
            display(path),
            owner.len() + 1,
            format!("{} assignment lines for {n} nodes", owner.len()),
        ));
    }
    let num_workers = owner.iter().copied().max().unwrap_or(0) as usize + 1;
    Partition::from_owner(g, owner, num_workers)
}

pub fn write_partition_file(path: &Path, p: &Partition) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for &id in p.owner() {
        writeln!(w, "{id}")?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.num_layers() as u32).to_le_bytes())?;
    w.write_all(&(params.taps() as u32).to_le_bytes())?;
    for &d in params.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for l in 0..params.num_layers() {
        for h in params.layer(l) {
            for &v in h.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(display(path), 0, "not a checkpoint file"));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            display(path),
            0,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let num_layers = read_u32(&mut r)? as usize;
    let taps = read_u32(&mut r)? as usize;
    let mut dims = Vec::with_capacity(num_layers + 1);
    for _ in 0..=num_layers {
        dims.push(read_u32(&mut r)? as usize);
    }
    let mut layers = Vec::with_capacity(num_layers);
    let mut f64buf = [0u8; 8];
    for l in 0..num_layers {
        let mut tap_mats = Vec::with_capacity(taps);
        for _ in 0..taps {
            let mut data = Vec::with_capacity(dims[l] * dims[l + 1]);
            for _ in 0..dims[l] * dims[l + 1] {
                r.read_exact(&mut f64buf)?;
                data.push(f64::from_le_bytes(f64buf));
            }
            tap_mats.push(Mat::from_vec(dims[l], dims[l + 1], data)?);
        }
        layers.push(tap_mats);
    }
    ModelParams::from_layers(dims, taps, layers)
}
