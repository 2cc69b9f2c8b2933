//! Turns overlapping binary masks into an exclusive partition and writes
//! it as a RATM file.

use rat_core::region::io::{load_partition, save_partition};
use rat_core::region::{postprocess_masks, MaskSet};

fn main() -> anyhow::Result<()> {
    let (h, w) = (6, 8);
    let rect = |r0: usize, r1: usize, c0: usize, c1: usize| -> Vec<bool> {
        (0..h * w)
            .map(|k| (r0..r1).contains(&(k / w)) && (c0..c1).contains(&(k % w)))
            .collect()
    };
    // a large box, a box nested inside it, and one overlapping its edge
    let masks = MaskSet::new(
        h,
        w,
        vec![rect(0, 5, 0, 6), rect(1, 3, 1, 3), rect(3, 6, 4, 8)],
    )?;
    let part = postprocess_masks(&masks);
    for r in 0..h {
        let row: Vec<String> = (0..w).map(|c| part.label(r, c).to_string()).collect();
        println!("{}", row.join(" "));
    }
    println!("sizes {:?}", part.region_sizes());

    let path = std::env::temp_dir().join("example_partition.ratm");
    save_partition(&path, &part)?;
    assert_eq!(load_partition(&path)?, part);
    println!("saved {}", path.display());
    Ok(())
}
