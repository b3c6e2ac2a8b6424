use std::fs;
use std::path::Path;

/// Writes a binary (P5) graymap with 0 for background and 255 for foreground.
pub fn write_mask(path: &Path, mask: &[bool], height: usize, width: usize) -> std::io::Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    fs::write(path, bytes)
}
