use crate::numerics::rng::permutation;
use crate::numerics::Streams;
use crate::{Error, Result};

/// Per-class seeded split: `round(fraction · n_c)` items of every class go
/// to the first list, the rest to the second. Both lists are sorted.
pub fn stratified_split(
    labels: &[usize],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!(
            "split fraction {fraction} outside (0, 1)"
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let streams = Streams::new(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let perm = permutation(&mut streams.stream("split", &[c as u64]), members.len());
        let cut = (fraction * members.len() as f64).round() as usize;
        for (j, &p) in perm.iter().enumerate() {
            if j < cut {
                train.push(members[p]);
            } else {
                test.push(members[p]);
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
