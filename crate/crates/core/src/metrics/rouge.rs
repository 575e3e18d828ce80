use super::TokenizedText;

/// Longest common subsequence length, O(|a|·|b|) time and O(|b|) space.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// ROUGE-L F1.
pub fn rouge_l(hyp: &TokenizedText, reference: &TokenizedText) -> f64 {
    rouge_l_beta(hyp, reference, 1.0)
}

pub fn rouge_l_beta(hyp: &TokenizedText, reference: &TokenizedText, beta: f64) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(hyp.tokens(), reference.tokens()) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / hyp.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}
