//! Seed derivation for reproducible substreams.
//!
//! Everything random in this crate runs off explicit u64 seeds. When one seed
//! has to fan out into many independent streams (one per chip, per layer, per
//! epoch), the substream seeds come from the splitmix64 finalizer below. The
//! finalizer is a bijection on u64, so distinct inputs always yield distinct
//! seeds.

/// splitmix64 finalizer (Steele, Lea, Flood). Bijective on u64.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for substream `index` of the stream rooted at `base`.
///
/// `mix64(base)` decorrelates adjacent base seeds, and adding the index
/// before a second mix keeps the map injective for a fixed base.
pub fn derive(base: u64, index: u64) -> u64 {
    mix64(mix64(base).wrapping_add(index))
}
