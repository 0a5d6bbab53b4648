//! Region-of-interest atlases: a map from voxel index to parcel id.
//!
//! Parcel id `-1` means "unassigned"; unassigned voxels exist in the map but
//! belong to no region. The number of regions is explicit so fraction vectors
//! from different participants always share one length.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

pub const UNASSIGNED: i32 = -1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiAtlas {
    map: BTreeMap<usize, i32>,
    n_rois: usize,
}

impl RoiAtlas {
    pub fn new(map: BTreeMap<usize, i32>, n_rois: usize) -> Result<Self> {
        for (vox, roi) in &map {
            if *roi < UNASSIGNED || *roi >= n_rois as i32 {
                return Err(Error::Atlas(format!(
                    "voxel {vox} has roi id {roi}, valid range is -1..{}",
                    n_rois as i32 - 1
                )));
            }
        }
        Ok(Self { map, n_rois })
    }

    pub fn n_rois(&self) -> usize {
        self.n_rois
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Region of a voxel: `None` when unassigned; error when the voxel is not
    /// in the atlas at all.
    pub fn roi_of(&self, voxel: usize) -> Result<Option<usize>> {
        match self.map.get(&voxel) {
            None => Err(Error::Atlas(format!("voxel {voxel} not present in atlas"))),
            Some(&r) if r == UNASSIGNED => Ok(None),
            Some(&r) => Ok(Some(r as usize)),
        }
    }

    pub fn store_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["voxel_index", "roi_id"])?;
        for (vox, roi) in &self.map {
            w.write_record([vox.to_string(), roi.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Load from CSV. `n_rois` may be given explicitly (e.g. 360 for a
    /// standard cortical parcellation); otherwise `max(roi_id) + 1` is used.
    pub fn load_csv(path: &Path, n_rois: Option<usize>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut map = BTreeMap::new();
        for row in rdr.records() {
            let row = row?;
            let vox: usize = row
                .get(0)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("{}: unparseable voxel_index", path.display())))?;
            let roi: i32 = row
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("{}: unparseable roi_id", path.display())))?;
            if map.insert(vox, roi).is_some() {
                return Err(Error::Atlas(format!("duplicate voxel {vox} in {}", path.display())));
            }
        }
        let inferred = map
            .values()
            .filter(|r| **r >= 0)
            .map(|r| *r as usize + 1)
            .max()
            .unwrap_or(0);
        Self::new(map, n_rois.unwrap_or(inferred))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_and_unassigned() {
        let mut m = BTreeMap::new();
        m.insert(0, 2);
        m.insert(1, UNASSIGNED);
        let atlas = RoiAtlas::new(m, 3).unwrap();
        assert_eq!(atlas.roi_of(0).unwrap(), Some(2));
        assert_eq!(atlas.roi_of(1).unwrap(), None);
        assert!(matches!(atlas.roi_of(5), Err(Error::Atlas(_))));
    }

    #[test]
    fn out_of_range_roi_rejected() {
        let mut m = BTreeMap::new();
        m.insert(0, 3);
        assert!(RoiAtlas::new(m, 3).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let mut m = BTreeMap::new();
        m.insert(0, 0);
        m.insert(1, 1);
        m.insert(2, UNASSIGNED);
        let atlas = RoiAtlas::new(m, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("atlas.csv");
        atlas.store_csv(&p).unwrap();
        let back = RoiAtlas::load_csv(&p, Some(2)).unwrap();
        assert_eq!(back, atlas);
    }
}
