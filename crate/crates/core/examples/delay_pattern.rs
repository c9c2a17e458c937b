//! Stagger K codebooks by one frame each and undo it.

use tempcondlm::tokens::{apply_delay_pattern, invert_delay_pattern, TokenGrid};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (frames, codebooks, size) = (6, 3, 10);
    let grid = TokenGrid::from_fn(frames, codebooks, size, |t, k| ((t + 3 * k) % size as usize) as u32)?;
    let delayed = apply_delay_pattern(&grid);

    println!("row  original    delayed (P = pad)");
    for t in 0..frames {
        let delayed_row: Vec<String> = (0..codebooks)
            .map(|k| if delayed.is_pad(t, k) { "P".into() } else { delayed.get(t, k).to_string() })
            .collect();
        println!("{t:>3}  {:<11} {}", format!("{:?}", grid.row(t)), delayed_row.join(" "));
    }

    let back = invert_delay_pattern(&delayed)?;
    for t in 0..frames {
        for k in 0..codebooks {
            if back.is_recoverable(t, k) {
                assert_eq!(back.get(t, k), grid.get(t, k));
            }
        }
    }
    println!("round trip restores every recoverable cell");
    Ok(())
}
