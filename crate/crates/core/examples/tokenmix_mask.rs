//! Token masks, simultaneous exchange and swap-back on two token matrices.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokenmix::augment::{gen_token_mask, token_exchange, token_swap_back, tokenmix_star_mask};
use tokenmix::tensor::Tensor;

fn main() -> tokenmix::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 16;
    let uniform = gen_token_mask(n, 0.5, &mut rng)?;
    let blocks = tokenmix_star_mask(4, 2, 0.5, &mut rng)?;
    println!("uniform mask  {}", uniform.to_bit_string());
    println!("block mask    {}", blocks.to_bit_string());

    // Row i of the unlabeled stream holds i + 1, row i of the labeled stream -(i + 1).
    let g_u = Tensor::from_fn(&[n, 2], |i| (i / 2 + 1) as f64);
    let g_l = Tensor::from_fn(&[n, 2], |i| -((i / 2 + 1) as f64));
    let (u, l) = token_exchange(&g_u, &g_l, &uniform)?;
    let first = |t: &Tensor| (0..n).map(|r| t.row(r)[0] as i64).collect::<Vec<_>>();
    println!("mixed unlabeled {:?}", first(&u));
    println!("mixed labeled   {:?}", first(&l));
    let restored = token_swap_back(&u, &l, &uniform)?;
    println!("swap-back restores the unlabeled stream: {}", restored == g_u);
    Ok(())
}
