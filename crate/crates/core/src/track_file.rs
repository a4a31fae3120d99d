//! `TRK1` track files: magic, `u32` T, `u32` N, `f32` coords `[T, N, 2]`,
//! `u8` visibility `[T, N]`. All integers little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::TrajectorySet;
use crate::tensor_io::{put_f32s, put_u32, write_atomic, ByteReader};

pub const TRK1_MAGIC: &[u8; 4] = b"TRK1";

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTracks {
    pub tracks: TrajectorySet,
    /// Tracks that are never visible in any frame.
    pub never_visible: u32,
}

pub fn encode_tracks(tracks: &TrajectorySet) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + tracks.coords.len() * 4 + tracks.visible.len());
    out.extend_from_slice(TRK1_MAGIC);
    put_u32(&mut out, tracks.t as u32);
    put_u32(&mut out, tracks.n as u32);
    put_f32s(&mut out, &tracks.coords);
    out.extend(tracks.visible.iter().map(|&v| v as u8));
    out
}

pub fn decode_tracks(bytes: &[u8]) -> Result<LoadedTracks> {
    let mut r = ByteReader::new(bytes);
    r.magic(TRK1_MAGIC)?;
    let t = r.u32("frame count")? as usize;
    let n = r.u32("track count")? as usize;
    let coords = r.f32s(t * n * 2, "coordinates")?;
    let vis_at = r.offset();
    let vis = r.take(t * n, "visibility")?;
    if let Some(pos) = vis.iter().position(|&b| b > 1) {
        return Err(Error::format(
            vis_at + pos as u64,
            format!("visibility byte {} not 0/1", vis[pos]),
        ));
    }
    r.finish("visibility")?;
    let visible: Vec<bool> = vis.iter().map(|&b| b == 1).collect();
    for (k, v) in visible.iter().enumerate() {
        if *v && !(coords[2 * k].is_finite() && coords[2 * k + 1].is_finite()) {
            return Err(Error::format(
                12 + 8 * k as u64,
                "non-finite coordinate on a visible point",
            ));
        }
    }
    let never_visible = (0..n).filter(|&i| (0..t).all(|f| !visible[f * n + i])).count() as u32;
    Ok(LoadedTracks {
        tracks: TrajectorySet::new(t, n, coords, visible)?,
        never_visible,
    })
}

pub fn save_tracks(path: &Path, tracks: &TrajectorySet) -> Result<()> {
    write_atomic(path, &encode_tracks(tracks))
}

pub fn load_tracks(path: &Path) -> Result<LoadedTracks> {
    decode_tracks(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_bitwise(t in 0usize..4, n in 0usize..6, seed in any::<u32>()) {
            let coords: Vec<f32> = (0..t * n * 2).map(|k| (k as f32 * 1.37 + seed as f32).sin() * 50.0).collect();
            let visible: Vec<bool> = (0..t * n).map(|k| !(k as u32 ^ seed).is_multiple_of(3)).collect();
            let tracks = TrajectorySet::new(t, n, coords, visible).unwrap();
            let back = decode_tracks(&encode_tracks(&tracks)).unwrap().tracks;
            prop_assert!(back.coords.iter().zip(&tracks.coords).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back.visible, tracks.visible);
        }
    }

    #[test]
    fn empty_and_all_invisible() {
        let empty = TrajectorySet::new(3, 0, vec![], vec![]).unwrap();
        let loaded = decode_tracks(&encode_tracks(&empty)).unwrap();
        assert_eq!(loaded.tracks.n, 0);
        assert_eq!(loaded.never_visible, 0);

        let hidden = TrajectorySet::new(2, 3, vec![1.0; 12], vec![false; 6]).unwrap();
        let loaded = decode_tracks(&encode_tracks(&hidden)).unwrap();
        assert_eq!(loaded.never_visible, 3);
    }

    #[test]
    fn bad_files() {
        let tracks = TrajectorySet::new(2, 2, vec![0.5; 8], vec![true; 4]).unwrap();
        let mut bytes = encode_tracks(&tracks);
        bytes[0] = b'X';
        assert!(matches!(decode_tracks(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = encode_tracks(&tracks);
        bytes.truncate(20);
        assert!(matches!(decode_tracks(&bytes), Err(Error::Format { offset: 12, .. })));
        let mut bytes = encode_tracks(&tracks);
        let last = bytes.len() - 1;
        bytes[last] = 7;
        assert!(matches!(decode_tracks(&bytes), Err(Error::Format { offset: 47, .. })));
    }
}
