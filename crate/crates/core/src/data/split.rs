use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DetectionDataset, ImageRecord};
use crate::error::{FsceError, Result};

/// Shot counts accepted by [`build_kshot_split`].
pub const KSHOT_MENU: [usize; 6] = [1, 2, 3, 5, 10, 30];

/// Balanced fine-tuning set with exactly `k` instances of every class.
#[derive(Debug, Clone, PartialEq)]
pub struct KShotSplit {
    pub k: usize,
    pub seed: u64,
    pub dataset: DetectionDataset,
    pub per_class_counts: BTreeMap<u32, usize>,
}

/// Samples `k` instances of every class, base and novel alike.
///
/// Images are visited in a seeded order, one class at a time. Picking an
/// image keeps each of its instances whose class still has quota left; the
/// surplus is dropped from the annotation list and becomes unlabeled.
pub fn build_kshot_split(
    dataset: &DetectionDataset,
    novel_classes: &[u32],
    k: usize,
    seed: u64,
) -> Result<KShotSplit> {
    if !KSHOT_MENU.contains(&k) {
        return Err(FsceError::Config(format!("K={k} not in {KSHOT_MENU:?}")));
    }
    let registry = dataset.registry.clone().with_novel(novel_classes)?;
    let available = dataset.instance_counts();
    for (&class, &n) in &available {
        if n < k {
            return Err(FsceError::InsufficientInstances {
                class: registry.name(class),
                available: n,
                required: k,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);

    let mut counts: BTreeMap<u32, usize> = available.keys().map(|&c| (c, 0)).collect();
    // image index -> kept annotation indices
    let mut chosen: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for class in registry.all_ids() {
        for &idx in &order {
            if counts[&class] == k {
                break;
            }
            if chosen.contains_key(&idx) {
                continue;
            }
            let img = &dataset.images[idx];
            if !img.annotations.iter().any(|a| a.class_id == class) {
                continue;
            }
            let mut slots: Vec<usize> = (0..img.annotations.len()).collect();
            slots.shuffle(&mut rng);
            let mut kept = Vec::new();
            for a in slots {
                let c = img.annotations[a].class_id;
                let n = counts.get_mut(&c).expect("registered class");
                if *n < k {
                    *n += 1;
                    kept.push(a);
                }
            }
            kept.sort_unstable();
            chosen.insert(idx, kept);
        }
    }

    let images = chosen
        .into_iter()
        .map(|(idx, kept)| {
            let img = &dataset.images[idx];
            ImageRecord {
                path: img.path.clone(),
                image: img.image.clone(),
                annotations: kept.into_iter().map(|a| img.annotations[a]).collect(),
            }
        })
        .collect();
    let dataset = DetectionDataset::new(images, registry)?;
    let per_class_counts = dataset.instance_counts();
    debug_assert!(per_class_counts.values().all(|&n| n == k));
    Ok(KShotSplit {
        k,
        seed,
        dataset,
        per_class_counts,
    })
}
