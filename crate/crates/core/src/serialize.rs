//! Binary container for compressed matrices.
//!
//! Layout (all integers little-endian u64 unless noted, all floats f64):
//!
//! ```text
//! magic    8 bytes  "HODBF\x01\x00\x00"
//! role     u8       0 = forward, 1 = inverse
//! n, depth, leaf_size
//! tol      f64
//! perm     n x u64            tree position -> original index
//! nodes    (2^(depth+1)-1) x (level, start, len)
//! leaves   count, then per leaf: rows, cols, rows*cols*(re, im)
//! offdiag  per node: u8 flag, then two butterflies      (forward role)
//! corr     per node: u8 flag, then one butterfly         (inverse role)
//! ```
//!
//! A butterfly is stored as its two block trees (level count, then per level
//! the (start, len) ranges), the factor blocks (leaf interpolations,
//! transfer levels, skeleton blocks), and the per-level rank table.

use crate::butterfly::Butterfly;
use crate::cluster::{ClusterNode, ClusterTree};
use crate::error::{Error, Result};
use crate::hodbf::{HodBfMatrix, MatrixRole};
use crate::types::{C64, CMat};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"HODBF\x01\x00\x00";

fn write_mat<W: Write>(w: &mut W, m: &CMat) -> Result<()> {
    w.write_u64::<LittleEndian>(m.shape()[0] as u64)?;
    w.write_u64::<LittleEndian>(m.shape()[1] as u64)?;
    for z in m.iter() {
        w.write_f64::<LittleEndian>(z.re)?;
        w.write_f64::<LittleEndian>(z.im)?;
    }
    Ok(())
}

fn read_mat<R: Read>(r: &mut R) -> Result<CMat> {
    let rows = r.read_u64::<LittleEndian>()? as usize;
    let cols = r.read_u64::<LittleEndian>()? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let re = r.read_f64::<LittleEndian>()?;
        let im = r.read_f64::<LittleEndian>()?;
        data.push(C64::new(re, im));
    }
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::Format(format!("bad matrix block: {e}")))
}

fn write_block_tree<W: Write>(w: &mut W, t: &crate::cluster::BlockTree) -> Result<()> {
    w.write_u64::<LittleEndian>(t.levels.len() as u64)?;
    for lvl in &t.levels {
        w.write_u64::<LittleEndian>(lvl.len() as u64)?;
        for &(s, l) in lvl {
            w.write_u64::<LittleEndian>(s as u64)?;
            w.write_u64::<LittleEndian>(l as u64)?;
        }
    }
    Ok(())
}

fn read_block_tree<R: Read>(r: &mut R) -> Result<crate::cluster::BlockTree> {
    let n_levels = r.read_u64::<LittleEndian>()? as usize;
    if n_levels == 0 || n_levels > 64 {
        return Err(Error::Format("bad block tree level count".into()));
    }
    let mut levels = Vec::with_capacity(n_levels);
    for _ in 0..n_levels {
        let cnt = r.read_u64::<LittleEndian>()? as usize;
        let mut lvl = Vec::with_capacity(cnt);
        for _ in 0..cnt {
            let s = r.read_u64::<LittleEndian>()? as usize;
            let l = r.read_u64::<LittleEndian>()? as usize;
            lvl.push((s, l));
        }
        levels.push(lvl);
    }
    Ok(crate::cluster::BlockTree { levels })
}

fn write_butterfly<W: Write>(w: &mut W, bf: &Butterfly) -> Result<()> {
    let (rt, ct, v0, transfers, bl, ranks) = bf.parts();
    write_block_tree(w, rt)?;
    write_block_tree(w, ct)?;
    w.write_u64::<LittleEndian>(v0.len() as u64)?;
    for m in v0 {
        write_mat(w, m)?;
    }
    w.write_u64::<LittleEndian>(transfers.len() as u64)?;
    for lvl in transfers {
        w.write_u64::<LittleEndian>(lvl.len() as u64)?;
        for m in lvl {
            write_mat(w, m)?;
        }
    }
    w.write_u64::<LittleEndian>(bl.len() as u64)?;
    for m in bl {
        write_mat(w, m)?;
    }
    w.write_u64::<LittleEndian>(ranks.len() as u64)?;
    for lvl in ranks {
        w.write_u64::<LittleEndian>(lvl.len() as u64)?;
        for &r in lvl {
            w.write_u64::<LittleEndian>(r as u64)?;
        }
    }
    Ok(())
}

fn read_butterfly<R: Read>(r: &mut R) -> Result<Butterfly> {
    let rt = read_block_tree(r)?;
    let ct = read_block_tree(r)?;
    let n_v0 = r.read_u64::<LittleEndian>()? as usize;
    let mut v0 = Vec::with_capacity(n_v0);
    for _ in 0..n_v0 {
        v0.push(read_mat(r)?);
    }
    let n_lvls = r.read_u64::<LittleEndian>()? as usize;
    let mut transfers = Vec::with_capacity(n_lvls);
    for _ in 0..n_lvls {
        let cnt = r.read_u64::<LittleEndian>()? as usize;
        let mut lvl = Vec::with_capacity(cnt);
        for _ in 0..cnt {
            lvl.push(read_mat(r)?);
        }
        transfers.push(lvl);
    }
    let n_bl = r.read_u64::<LittleEndian>()? as usize;
    let mut bl = Vec::with_capacity(n_bl);
    for _ in 0..n_bl {
        bl.push(read_mat(r)?);
    }
    let n_rlvls = r.read_u64::<LittleEndian>()? as usize;
    let mut ranks = Vec::with_capacity(n_rlvls);
    for _ in 0..n_rlvls {
        let cnt = r.read_u64::<LittleEndian>()? as usize;
        let mut lvl = Vec::with_capacity(cnt);
        for _ in 0..cnt {
            lvl.push(r.read_u64::<LittleEndian>()? as usize);
        }
        ranks.push(lvl);
    }
    if rt.depth() != ct.depth() || v0.len() != 1usize << rt.depth() {
        return Err(Error::Format("inconsistent butterfly factor counts".into()));
    }
    Ok(Butterfly::from_parts(rt, ct, v0, transfers, bl, ranks))
}

pub fn write_hodbf<W: Write>(w: &mut W, mat: &HodBfMatrix) -> Result<()> {
    let (tree, role, tol, leaf, offdiag, corrections) = mat.parts();
    w.write_all(MAGIC)?;
    w.write_u8(match role {
        MatrixRole::Forward => 0,
        MatrixRole::Inverse => 1,
    })?;
    let (nodes, depth, perm, leaf_size) = tree.parts();
    w.write_u64::<LittleEndian>(tree.len() as u64)?;
    w.write_u64::<LittleEndian>(depth as u64)?;
    w.write_u64::<LittleEndian>(leaf_size as u64)?;
    w.write_f64::<LittleEndian>(tol)?;
    for &p in perm {
        w.write_u64::<LittleEndian>(p as u64)?;
    }
    for node in nodes {
        w.write_u64::<LittleEndian>(node.level as u64)?;
        w.write_u64::<LittleEndian>(node.start as u64)?;
        w.write_u64::<LittleEndian>(node.len as u64)?;
    }
    w.write_u64::<LittleEndian>(leaf.len() as u64)?;
    for m in leaf {
        write_mat(w, m)?;
    }
    match role {
        MatrixRole::Forward => {
            for pair in offdiag {
                match pair {
                    None => w.write_u8(0)?,
                    Some((a, b)) => {
                        w.write_u8(1)?;
                        write_butterfly(w, a)?;
                        write_butterfly(w, b)?;
                    }
                }
            }
        }
        MatrixRole::Inverse => {
            for f in corrections {
                match f {
                    None => w.write_u8(0)?,
                    Some(bf) => {
                        w.write_u8(1)?;
                        write_butterfly(w, bf)?;
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn read_hodbf<R: Read>(r: &mut R) -> Result<HodBfMatrix> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a hodbf container".into()));
    }
    let role = match r.read_u8()? {
        0 => MatrixRole::Forward,
        1 => MatrixRole::Inverse,
        other => return Err(Error::Format(format!("unknown role tag {other}"))),
    };
    let n = r.read_u64::<LittleEndian>()? as usize;
    let depth = r.read_u64::<LittleEndian>()? as usize;
    let leaf_size = r.read_u64::<LittleEndian>()? as usize;
    let tol = r.read_f64::<LittleEndian>()?;
    if depth > 48 || n == 0 {
        return Err(Error::Format("implausible tree header".into()));
    }
    let mut perm = Vec::with_capacity(n);
    for _ in 0..n {
        let p = r.read_u64::<LittleEndian>()? as usize;
        if p >= n {
            return Err(Error::Format("permutation entry out of range".into()));
        }
        perm.push(p);
    }
    let n_nodes = (1usize << (depth + 1)) - 1;
    let mut nodes = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        let level = r.read_u64::<LittleEndian>()? as usize;
        let start = r.read_u64::<LittleEndian>()? as usize;
        let len = r.read_u64::<LittleEndian>()? as usize;
        if start + len > n {
            return Err(Error::Format("node range out of bounds".into()));
        }
        nodes.push(ClusterNode { level, start, len });
    }
    let tree = ClusterTree::from_parts(nodes, depth, perm, leaf_size);
    let n_leaf = r.read_u64::<LittleEndian>()? as usize;
    if n_leaf != 1usize << depth {
        return Err(Error::Format("leaf block count mismatch".into()));
    }
    let mut leaf = Vec::with_capacity(n_leaf);
    for _ in 0..n_leaf {
        leaf.push(read_mat(r)?);
    }
    let mut offdiag = Vec::new();
    let mut corrections = Vec::new();
    match role {
        MatrixRole::Forward => {
            for _ in 0..n_nodes {
                offdiag.push(match r.read_u8()? {
                    0 => None,
                    1 => Some((read_butterfly(r)?, read_butterfly(r)?)),
                    other => return Err(Error::Format(format!("bad offdiag flag {other}"))),
                });
            }
        }
        MatrixRole::Inverse => {
            for _ in 0..n_nodes {
                corrections.push(match r.read_u8()? {
                    0 => None,
                    1 => Some(read_butterfly(r)?),
                    other => return Err(Error::Format(format!("bad correction flag {other}"))),
                });
            }
        }
    }
    Ok(HodBfMatrix::from_parts(tree, role, tol, leaf, offdiag, corrections))
}

pub fn save_hodbf<P: AsRef<Path>>(mat: &HodBfMatrix, path: P) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_hodbf(&mut w, mat)
}

pub fn load_hodbf<P: AsRef<Path>>(path: P) -> Result<HodBfMatrix> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_hodbf(&mut r)
}
