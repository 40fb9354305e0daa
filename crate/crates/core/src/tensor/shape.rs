//! Broadcasting with trailing-axis alignment.

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How the flat index of a broadcast output maps onto one operand.
pub(crate) enum Bcast {
    Same,
    /// Operand is a trailing block of `n` elements repeated over the output.
    Cycle(usize),
    Map(Vec<usize>),
}

impl Bcast {
    pub(crate) fn new(out: &[usize], src: &[usize]) -> Self {
        if out == src {
            return Bcast::Same;
        }
        let n: usize = src.iter().product();
        let off = out.len() - src.len();
        let leading_ones = src.iter().take_while(|&&d| d == 1).count();
        if src[leading_ones..] == out[off + leading_ones..] {
            return Bcast::Cycle(n);
        }
        Bcast::Map(index_map(out, src))
    }

    #[inline]
    pub(crate) fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cycle(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }
}

/// Flat index into `src` for every flat index of `out`, where `src`
/// broadcasts to `out`.
pub(crate) fn index_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let off = out.len() - src.len();
    let src_strides = strides(src);
    let mut eff = vec![0usize; out.len()];
    for (i, &d) in src.iter().enumerate() {
        eff[off + i] = if d == 1 { 0 } else { src_strides[i] };
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out.len()];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            flat += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            flat -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Sums a gradient of the broadcast output back onto the operand's shape.
pub(crate) fn reduce_to(g: &[f32], map: &Bcast, src_numel: usize) -> Vec<f32> {
    match map {
        Bcast::Same => g.to_vec(),
        _ => {
            let mut acc = vec![0f64; src_numel];
            for (i, &v) in g.iter().enumerate() {
                acc[map.at(i)] += v as f64;
            }
            acc.into_iter().map(|v| v as f32).collect()
        }
    }
}
