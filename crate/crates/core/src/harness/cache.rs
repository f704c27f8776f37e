//! Content-addressed binary cache.
//!
//! File format: magic `HOMZ1`, a little-endian u32 header length, a JSON
//! header describing the arrays (name, shape, dtype, offset, length) plus a
//! SHA-256 of the payload and free-form metadata, then the concatenated
//! little-endian f64 payload. Writes are atomic (temp file + rename); reads
//! verify the checksum and fail naming the file.

use crate::cell::{CellResiduals, CellSolution, CellTable};
use crate::error::{HomError, Result};
use crate::pde::{DecouplingField, SolveStats, SystemKind};
use crate::torus::{PeriodicField, TorusGrid};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 5] = b"HOMZ1";

#[derive(Debug, Serialize, Deserialize)]
struct ArrayInfo {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arrays: Vec<ArrayInfo>,
    payload_hash: String,
    meta: Value,
}

/// In-memory view of an archive.
#[derive(Debug)]
pub struct Archive {
    pub arrays: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    pub meta: Value,
}

impl Archive {
    pub fn new(meta: Value) -> Archive {
        Archive {
            arrays: BTreeMap::new(),
            meta,
        }
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.insert(name.to_string(), (shape, data));
    }

    pub fn take(&mut self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        self.arrays
            .remove(name)
            .ok_or_else(|| HomError::Cache(format!("archive is missing array `{name}`")))
    }
}

pub fn write_archive(path: &Path, archive: &Archive) -> Result<()> {
    let mut payload: Vec<u8> = Vec::new();
    let mut infos = Vec::new();
    for (name, (shape, data)) in &archive.arrays {
        let offset = payload.len();
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        infos.push(ArrayInfo {
            name: name.clone(),
            shape: shape.clone(),
            dtype: "f64".into(),
            offset,
            len: data.len(),
        });
    }
    let header = Header {
        arrays: infos,
        payload_hash: hex::encode(Sha256::digest(&payload)),
        meta: archive.meta.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&(header_json.len() as u32).to_le_bytes())?;
        f.write_all(&header_json)?;
        f.write_all(&payload)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| HomError::Cache(format!("cannot open {}: {e}", path.display())))?;
    let mut magic = [0u8; 5];
    f.read_exact(&mut magic)
        .map_err(|e| HomError::Cache(format!("truncated cache file {}: {e}", path.display())))?;
    if &magic != MAGIC {
        return Err(HomError::Cache(format!(
            "bad magic in cache file {}",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 4];
    f.read_exact(&mut len_bytes)
        .map_err(|e| HomError::Cache(format!("truncated cache file {}: {e}", path.display())))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json)
        .map_err(|e| HomError::Cache(format!("truncated cache file {}: {e}", path.display())))?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| HomError::Cache(format!("bad header in {}: {e}", path.display())))?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    let digest = hex::encode(Sha256::digest(&payload));
    if digest != header.payload_hash {
        return Err(HomError::Cache(format!(
            "checksum mismatch in cache file {} (expected {}, found {})",
            path.display(),
            header.payload_hash,
            digest
        )));
    }
    let mut arrays = BTreeMap::new();
    for info in header.arrays {
        let start = info.offset;
        let end = start + info.len * 8;
        if end > payload.len() {
            return Err(HomError::Cache(format!(
                "array `{}` exceeds the payload in {}",
                info.name,
                path.display()
            )));
        }
        let mut data = Vec::with_capacity(info.len);
        for chunk in payload[start..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        arrays.insert(info.name, (info.shape, data));
    }
    Ok(Archive {
        arrays,
        meta: header.meta,
    })
}

/// Directory of content-addressed archives.
#[derive(Debug, Clone)]
pub struct CacheDir {
    root: PathBuf,
}

impl CacheDir {
    pub fn new(root: impl Into<PathBuf>) -> CacheDir {
        CacheDir { root: root.into() }
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.root.join(format!("{key}.homz"))
    }

    pub fn has(&self, key: &str) -> bool {
        self.path_for(key).is_file()
    }

    pub fn load(&self, key: &str) -> Result<Archive> {
        read_archive(&self.path_for(key))
    }

    pub fn store(&self, key: &str, archive: &Archive) -> Result<()> {
        write_archive(&self.path_for(key), archive)
    }
}

/// Content key derived from string parts (stage name, config hashes,
/// upstream keys, crate version).
pub fn content_key(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.as_bytes());
        hasher.update([0u8]);
    }
    hex::encode(hasher.finalize())[..32].to_string()
}

// ---- cell table (de)serialization ----

#[derive(Serialize, Deserialize)]
struct CellMeta {
    p_dim: usize,
    q_dim: usize,
    n: usize,
    y_axes: Vec<Vec<f64>>,
    ys: Vec<Vec<f64>>,
    shifts_b: Vec<Vec<f64>>,
    shifts_e: Vec<Vec<f64>>,
    residuals: Vec<CellResidualsSer>,
}

#[derive(Serialize, Deserialize)]
struct CellResidualsSer {
    invariant: f64,
    bhat: Vec<f64>,
    ehat: Vec<f64>,
    dy_bhat: Vec<f64>,
    dy_ehat: Vec<f64>,
}

const CELL_FIELDS: [&str; 12] = [
    "p", "bhat", "ehat", "grad_x_bhat", "grad_x_ehat", "dy_bhat", "dy_ehat", "dyy_bhat",
    "dyy_ehat", "dxy_bhat", "dxy_ehat", "dy_p",
];

fn field_of<'a>(sol: &'a CellSolution, name: &str) -> &'a PeriodicField {
    match name {
        "p" => &sol.p,
        "bhat" => &sol.bhat,
        "ehat" => &sol.ehat,
        "grad_x_bhat" => &sol.grad_x_bhat,
        "grad_x_ehat" => &sol.grad_x_ehat,
        "dy_bhat" => &sol.dy_bhat,
        "dy_ehat" => &sol.dy_ehat,
        "dyy_bhat" => &sol.dyy_bhat,
        "dyy_ehat" => &sol.dyy_ehat,
        "dxy_bhat" => &sol.dxy_bhat,
        "dxy_ehat" => &sol.dxy_ehat,
        "dy_p" => &sol.dy_p,
        _ => unreachable!(),
    }
}

pub fn cell_table_to_archive(table: &CellTable) -> Result<Archive> {
    let meta = CellMeta {
        p_dim: table.p_dim,
        q_dim: table.q_dim,
        n: table.grid.points_per_axis(),
        y_axes: table.y_axes.clone(),
        ys: table.entries.iter().map(|e| e.y.clone()).collect(),
        shifts_b: table.entries.iter().map(|e| e.shift_b.clone()).collect(),
        shifts_e: table.entries.iter().map(|e| e.shift_e.clone()).collect(),
        residuals: table
            .entries
            .iter()
            .map(|e| CellResidualsSer {
                invariant: e.residuals.invariant,
                bhat: e.residuals.bhat.clone(),
                ehat: e.residuals.ehat.clone(),
                dy_bhat: e.residuals.dy_bhat.clone(),
                dy_ehat: e.residuals.dy_ehat.clone(),
            })
            .collect(),
    };
    let mut archive = Archive::new(serde_json::to_value(&meta)?);
    let nt = table.grid.n_total();
    for field in CELL_FIELDS {
        let comps = field_of(&table.entries[0], field).n_comp();
        let mut data = Vec::with_capacity(table.entries.len() * comps * nt);
        for e in &table.entries {
            let f = field_of(e, field);
            for c in 0..comps {
                data.extend_from_slice(f.comp(c).as_slice());
            }
        }
        archive.push(field, vec![table.entries.len(), comps, nt], data);
    }
    Ok(archive)
}

pub fn cell_table_from_archive(mut archive: Archive) -> Result<CellTable> {
    let meta: CellMeta = serde_json::from_value(archive.meta.clone())
        .map_err(|e| HomError::Cache(format!("bad cell-table metadata: {e}")))?;
    let grid = TorusGrid::new(meta.p_dim, meta.n)?;
    let nt = grid.n_total();
    let n_entries = meta.ys.len();
    let mut fields: BTreeMap<&str, (usize, Vec<f64>)> = BTreeMap::new();
    for field in CELL_FIELDS {
        let (shape, data) = archive.take(field)?;
        if shape.len() != 3 || shape[0] != n_entries || shape[2] != nt {
            return Err(HomError::Cache(format!("array `{field}` has unexpected shape")));
        }
        fields.insert(field, (shape[1], data));
    }
    let mut entries = Vec::with_capacity(n_entries);
    for (i, y) in meta.ys.iter().enumerate() {
        let get = |name: &str| -> Result<PeriodicField> {
            let (comps, data) = fields.get(name).unwrap();
            let base = i * comps * nt;
            let vecs: Vec<DVector<f64>> = (0..*comps)
                .map(|c| DVector::from_column_slice(&data[base + c * nt..base + (c + 1) * nt]))
                .collect();
            PeriodicField::new(grid, vecs)
        };
        entries.push(CellSolution {
            y: y.clone(),
            p: get("p")?,
            bhat: get("bhat")?,
            ehat: get("ehat")?,
            grad_x_bhat: get("grad_x_bhat")?,
            grad_x_ehat: get("grad_x_ehat")?,
            dy_bhat: get("dy_bhat")?,
            dy_ehat: get("dy_ehat")?,
            dyy_bhat: get("dyy_bhat")?,
            dyy_ehat: get("dyy_ehat")?,
            dxy_bhat: get("dxy_bhat")?,
            dxy_ehat: get("dxy_ehat")?,
            dy_p: get("dy_p")?,
            residuals: CellResiduals {
                invariant: meta.residuals[i].invariant,
                bhat: meta.residuals[i].bhat.clone(),
                ehat: meta.residuals[i].ehat.clone(),
                dy_bhat: meta.residuals[i].dy_bhat.clone(),
                dy_ehat: meta.residuals[i].dy_ehat.clone(),
            },
            shift_b: meta.shifts_b[i].clone(),
            shift_e: meta.shifts_e[i].clone(),
        });
    }
    Ok(CellTable {
        grid,
        y_axes: meta.y_axes,
        entries,
        q_dim: meta.q_dim,
        p_dim: meta.p_dim,
    })
}

// ---- homogenized table (de)serialization ----

#[derive(Serialize, Deserialize)]
struct TableMeta {
    p_dim: usize,
    q_dim: usize,
    n_y_axes: usize,
    n_z_axes: usize,
    provenance: String,
}

pub fn table_to_archive(table: &crate::homog::HomogenizedTable) -> Result<Archive> {
    let parts = table.to_parts();
    let meta = TableMeta {
        p_dim: parts.p_dim,
        q_dim: parts.q_dim,
        n_y_axes: parts.y_axes.len(),
        n_z_axes: parts.z_axes.len(),
        provenance: parts.provenance.clone(),
    };
    let mut archive = Archive::new(serde_json::to_value(&meta)?);
    for (d, axis) in parts.y_axes.iter().enumerate() {
        archive.push(&format!("y_axis{d}"), vec![axis.len()], axis.clone());
    }
    for (d, axis) in parts.z_axes.iter().enumerate() {
        archive.push(&format!("z_axis{d}"), vec![axis.len()], axis.clone());
    }
    archive.push("ubar", vec![parts.ubar.len()], parts.ubar);
    archive.push("vbar", vec![parts.vbar.len()], parts.vbar);
    archive.push("albar", vec![parts.albar.len()], parts.albar);
    archive.push("sqrt_albar", vec![parts.sqrt_albar.len()], parts.sqrt_albar);
    Ok(archive)
}

pub fn table_from_archive(mut archive: Archive) -> Result<crate::homog::HomogenizedTable> {
    let meta: TableMeta = serde_json::from_value(archive.meta.clone())
        .map_err(|e| HomError::Cache(format!("bad table metadata: {e}")))?;
    let mut y_axes = Vec::with_capacity(meta.n_y_axes);
    for d in 0..meta.n_y_axes {
        y_axes.push(archive.take(&format!("y_axis{d}"))?.1);
    }
    let mut z_axes = Vec::with_capacity(meta.n_z_axes);
    for d in 0..meta.n_z_axes {
        z_axes.push(archive.take(&format!("z_axis{d}"))?.1);
    }
    Ok(crate::homog::HomogenizedTable::from_parts(
        crate::homog::TableParts {
            p_dim: meta.p_dim,
            q_dim: meta.q_dim,
            y_axes,
            z_axes,
            ubar: archive.take("ubar")?.1,
            vbar: archive.take("vbar")?.1,
            albar: archive.take("albar")?.1,
            sqrt_albar: archive.take("sqrt_albar")?.1,
            provenance: meta.provenance,
        },
    ))
}

// ---- decoupling field (de)serialization ----

#[derive(Serialize, Deserialize)]
struct FieldMeta {
    p_dim: usize,
    q_dim: usize,
    n: usize,
    t_end: f64,
    system: SystemKind,
    stats: SolveStats,
    sup_per_slice: Vec<f64>,
    hess_sup_per_slice: Vec<f64>,
    has_hessians: bool,
}

pub fn field_to_archive(field: &DecouplingField) -> Result<Archive> {
    let meta = FieldMeta {
        p_dim: field.grid.p_dim(),
        q_dim: field.q_dim,
        n: field.grid.points_per_axis(),
        t_end: field.t_end,
        system: field.system.clone(),
        stats: field.stats.clone(),
        sup_per_slice: field.sup_per_slice.clone(),
        hess_sup_per_slice: field.hess_sup_per_slice.clone(),
        has_hessians: field.hessians.is_some(),
    };
    let mut archive = Archive::new(serde_json::to_value(&meta)?);
    archive.push("times", vec![field.times.len()], field.times.clone());
    let stack = |snaps: &[DVector<f64>]| -> (Vec<usize>, Vec<f64>) {
        let rows = snaps.len();
        let cols = snaps.first().map(|s| s.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows * cols);
        for s in snaps {
            data.extend_from_slice(s.as_slice());
        }
        (vec![rows, cols], data)
    };
    let (shape, data) = stack(&field.values);
    archive.push("values", shape, data);
    let (shape, data) = stack(&field.grads);
    archive.push("grads", shape, data);
    if let Some(h) = &field.hessians {
        let (shape, data) = stack(h);
        archive.push("hessians", shape, data);
    }
    Ok(archive)
}

pub fn field_from_archive(mut archive: Archive) -> Result<DecouplingField> {
    let meta: FieldMeta = serde_json::from_value(archive.meta.clone())
        .map_err(|e| HomError::Cache(format!("bad field metadata: {e}")))?;
    let grid = TorusGrid::new(meta.p_dim, meta.n)?;
    let (_, times) = archive.take("times")?;
    let unstack = |shape: Vec<usize>, data: Vec<f64>| -> Vec<DVector<f64>> {
        let (rows, cols) = (shape[0], shape[1]);
        (0..rows)
            .map(|r| DVector::from_column_slice(&data[r * cols..(r + 1) * cols]))
            .collect()
    };
    let (shape, data) = archive.take("values")?;
    let values = unstack(shape, data);
    let (shape, data) = archive.take("grads")?;
    let grads = unstack(shape, data);
    let hessians = if meta.has_hessians {
        let (shape, data) = archive.take("hessians")?;
        Some(unstack(shape, data))
    } else {
        None
    };
    Ok(DecouplingField {
        grid,
        q_dim: meta.q_dim,
        t_end: meta.t_end,
        times,
        values,
        grads,
        hessians,
        system: meta.system,
        stats: meta.stats,
        sup_per_slice: meta.sup_per_slice,
        hess_sup_per_slice: meta.hess_sup_per_slice,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::{build_cell_table, CellOptions};
    use crate::coeffs::CoefficientSpec;

    #[test]
    fn archive_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let cache = CacheDir::new(dir.path());
        let mut archive = Archive::new(serde_json::json!({"kind": "test"}));
        archive.push("a", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        archive.push("b", vec![2], vec![-1.5, 0.25]);
        cache.store("k1", &archive).unwrap();
        assert!(cache.has("k1"));
        let mut loaded = cache.load("k1").unwrap();
        let (shape, data) = loaded.take("a").unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        // flip a payload byte: checksum error naming the file
        let path = cache.path_for("k1");
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = cache.load("k1").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("checksum"), "got: {msg}");
        assert!(msg.contains("k1.homz"), "got: {msg}");
    }

    #[test]
    fn cell_table_round_trip() {
        let spec = CoefficientSpec::preset("quasilinear-demo").unwrap();
        let g = TorusGrid::new(1, 16).unwrap();
        let table =
            build_cell_table(&spec, &[-1.0], &[1.0], 3, g, &CellOptions::default()).unwrap();
        let archive = cell_table_to_archive(&table).unwrap();
        let back = cell_table_from_archive(archive).unwrap();
        assert_eq!(back.n_entries(), 3);
        for (a, b) in table.entries.iter().zip(&back.entries) {
            assert_eq!(a.y, b.y);
            assert_eq!(a.p.comp(0).as_slice(), b.p.comp(0).as_slice());
            assert_eq!(a.dxy_bhat.comp(0).as_slice(), b.dxy_bhat.comp(0).as_slice());
        }
    }

    #[test]
    fn field_round_trip() {
        use crate::homog::HomogenizedTable;
        use crate::pde::{solve_limit_system, PdeOptions};
        use crate::torus::PeriodicField;
        let grid = TorusGrid::new(1, 16).unwrap();
        let table = HomogenizedTable::from_fn(
            1,
            1,
            vec![vec![-2.0, 2.0]],
            vec![vec![-4.0, 4.0]],
            |_, _| vec![0.0],
            |_, _| vec![0.0],
            |_| vec![1.0],
        )
        .unwrap();
        let h = PeriodicField::from_fn(grid, 1, |x| {
            vec![(2.0 * std::f64::consts::PI * x[0]).sin()]
        })
        .unwrap();
        let f = solve_limit_system(&table, &h, 0.01, grid, &[0.0, 0.005], &PdeOptions::default())
            .unwrap();
        let archive = field_to_archive(&f).unwrap();
        let back = field_from_archive(archive).unwrap();
        assert_eq!(back.times, f.times);
        assert_eq!(back.values[0].as_slice(), f.values[0].as_slice());
        assert_eq!(back.system, f.system);
    }
}
