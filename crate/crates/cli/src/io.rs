//! Input loading and all-or-nothing output writes.

use std::io::Write;
use std::path::Path;

use tilesr_core::media::{self, MediaKind};
use tilesr_core::schedule::init_noise;
use tilesr_core::tensor::{Extent3, LatentVolume};

use crate::config::RunConfig;
use crate::error::CliError;

fn is_lvol(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("lvol"))
}

fn kind_of(extent: Extent3) -> MediaKind {
    if extent.t == 1 {
        MediaKind::Image
    } else {
        MediaKind::Video
    }
}

/// Smooth-ish pattern in `[0, 1]` derived from the seed, for demos without
/// input files.
pub fn synthetic_input(extent: Extent3, seed: u64) -> LatentVolume {
    init_noise(extent, 3, seed ^ 0x5eed_1a7e).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0))
}

pub fn load_input(cfg: &RunConfig) -> Result<(LatentVolume, MediaKind), CliError> {
    match (&cfg.input.path, cfg.input.synthetic) {
        (Some(p), _) if is_lvol(p) => {
            let v = LatentVolume::read_lvol(p).map_err(|e| CliError::Config(format!("input: {e}")))?;
            let kind = kind_of(v.extent());
            Ok((v, kind))
        }
        (Some(p), _) => {
            let (v, d) = media::load_media(p)?;
            Ok((v, d.kind))
        }
        (None, Some(e)) => {
            let extent = Extent3::from_array(e).map_err(|e| CliError::Config(format!("input.synthetic: {e}")))?;
            Ok((synthetic_input(extent, cfg.seed), kind_of(extent)))
        }
        (None, None) => Err(CliError::Config("input needs `path` or `synthetic`".into())),
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Internal(format!("{}: {e}", path.display()))
}

/// Temporary files are created owner-only; results should get the usual
/// permissions once renamed into place.
#[cfg(unix)]
fn publishable(path: &Path, mode: u32) -> Result<(), CliError> {
    use std::os::unix::fs::PermissionsExt;
    std::fs::set_permissions(path, std::fs::Permissions::from_mode(mode)).map_err(|e| io_err(path, e))
}

#[cfg(not(unix))]
fn publishable(_: &Path, _: u32) -> Result<(), CliError> {
    Ok(())
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    publishable(tmp.path(), 0o644)?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

/// Saves the decoded output. `.lvol` keeps full precision; other paths are
/// PNG images or, for multi-frame volumes, directories of PNG frames.
pub fn write_output(path: &Path, vol: &LatentVolume) -> Result<(), CliError> {
    if is_lvol(path) {
        return write_atomic(path, &vol.to_lvol_bytes());
    }
    let encode_err = |e: media::MediaError| CliError::Config(format!("{e}; use a .lvol output for raw latents"));
    match kind_of(vol.extent()) {
        MediaKind::Image => write_atomic(path, &media::encode_png(vol, 0).map_err(encode_err)?),
        MediaKind::Video => {
            let parent = path
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."));
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
            let staging = tempfile::tempdir_in(parent).map_err(|e| io_err(parent, e))?;
            media::save_media(vol, MediaKind::Video, staging.path()).map_err(encode_err)?;
            if path.exists() {
                std::fs::remove_dir_all(path).map_err(|e| io_err(path, e))?;
            }
            publishable(staging.path(), 0o755)?;
            let staged = staging.keep();
            std::fs::rename(&staged, path).map_err(|e| io_err(path, e))?;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lvol_output_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let vol = synthetic_input(Extent3::new(2, 5, 7).unwrap(), 3);
        let p = dir.path().join("nested/out.lvol");
        write_output(&p, &vol).unwrap();
        assert_eq!(LatentVolume::read_lvol(&p).unwrap(), vol);
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            assert_eq!(std::fs::metadata(&p).unwrap().permissions().mode() & 0o777, 0o644);
        }
    }

    #[test]
    fn video_output_replaces_an_existing_directory() {
        let dir = tempfile::tempdir().unwrap();
        let frames = dir.path().join("frames");
        std::fs::create_dir_all(&frames).unwrap();
        std::fs::write(frames.join("stale.txt"), "x").unwrap();
        write_output(&frames, &synthetic_input(Extent3::new(2, 4, 4).unwrap(), 1)).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(&frames)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names, ["frame_00000.png", "frame_00001.png"]);
    }

    #[test]
    fn synthetic_input_is_seeded_and_bounded() {
        let e = Extent3::new(1, 8, 8).unwrap();
        assert_eq!(synthetic_input(e, 1), synthetic_input(e, 1));
        assert_ne!(synthetic_input(e, 1), synthetic_input(e, 2));
        let (lo, hi) = synthetic_input(e, 1).min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
    }
}
