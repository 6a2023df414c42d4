//! Two-layer LSTM question encoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::session::Session;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Token id reserved for padding. Its embedding is the zero vector.
pub const PAD: usize = 0;

/// One LSTM layer. Gate blocks along the `4h` axis are ordered
/// input, forget, cell candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub b: Tensor,
}

impl LstmLayer {
    pub fn random<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        LstmLayer {
            w_ih: Tensor::glorot(input, 4 * hidden, rng),
            w_hh: Tensor::glorot(hidden, 4 * hidden, rng),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.rows()
    }

    /// Runs the recurrence over `xs: [T x in]` from a zero state and returns
    /// the hidden states `[T x h]`.
    pub fn forward<'m>(&'m self, s: &mut Session<'m>, xs: Var) -> Result<Var> {
        let h = self.hidden();
        let steps = s.value(xs).rows();
        let (w_ih, w_hh, b) = (s.param(&self.w_ih), s.param(&self.w_hh), s.param(&self.b));
        let projected = s.tape.matmul(xs, w_ih)?;
        let projected = s.tape.add_row(projected, b)?;
        let mut h_prev = s.input(Tensor::zeros(&[1, h]));
        let mut c_prev = s.input(Tensor::zeros(&[1, h]));
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let x_t = s.tape.gather_rows(projected, &[Some(t)])?;
            let rec = s.tape.matmul(h_prev, w_hh)?;
            let gates = s.tape.add(x_t, rec)?;
            let i = s.tape.slice_last(gates, 0, h)?;
            let i = s.tape.sigmoid(i);
            let f = s.tape.slice_last(gates, h, 2 * h)?;
            let f = s.tape.sigmoid(f);
            let g = s.tape.slice_last(gates, 2 * h, 3 * h)?;
            let g = s.tape.tanh(g);
            let o = s.tape.slice_last(gates, 3 * h, 4 * h)?;
            let o = s.tape.sigmoid(o);
            let keep = s.tape.mul(f, c_prev)?;
            let write = s.tape.mul(i, g)?;
            let c = s.tape.add(keep, write)?;
            let tc = s.tape.tanh(c);
            let h_t = s.tape.mul(o, tc)?;
            outputs.push(h_t);
            h_prev = h_t;
            c_prev = c;
        }
        s.tape.concat_rows(&outputs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuestionEncoder {
    pub embedding: Tensor,
    pub layers: [LstmLayer; 2],
    pub dropout_p: f64,
}

/// Encoder output on a tape.
#[derive(Clone, Debug)]
pub struct EncodedQuestion {
    /// `[T x 2h]`: both layers' outputs concatenated per word.
    pub words: Var,
    /// `[1 x 2h]`: the word feature at the last non-pad position.
    pub last: Var,
    /// `true` at non-pad positions.
    pub mask: Vec<bool>,
}

impl QuestionEncoder {
    pub fn random<R: Rng + ?Sized>(
        vocab: usize,
        embed: usize,
        hidden: usize,
        dropout_p: f64,
        rng: &mut R,
    ) -> Self {
        let mut embedding = Tensor::glorot(vocab, embed, rng);
        embedding.data_mut()[..embed].fill(0.0);
        QuestionEncoder {
            embedding,
            layers: [
                LstmLayer::random(embed, hidden, rng),
                LstmLayer::random(hidden, hidden, rng),
            ],
            dropout_p,
        }
    }

    pub fn vocab(&self) -> usize {
        self.embedding.rows()
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden()
    }

    /// Width of a per-word feature, `2h`.
    pub fn feature_dim(&self) -> usize {
        2 * self.hidden()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("lstm{l}.w_ih"), &layer.w_ih));
            out.push((format!("lstm{l}.w_hh"), &layer.w_hh));
            out.push((format!("lstm{l}.b"), &layer.b));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.layers {
            out.push(&mut layer.w_ih);
            out.push(&mut layer.w_hh);
            out.push(&mut layer.b);
        }
        out
    }

    pub fn encode<'m>(&'m self, s: &mut Session<'m>, tokens: &[usize]) -> Result<EncodedQuestion> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab()) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab()
            )));
        }
        let rows: Vec<Option<usize>> = tokens
            .iter()
            .map(|&t| if t == PAD { None } else { Some(t) })
            .collect();
        let table = s.param(&self.embedding);
        let embedded = s.tape.gather_rows(table, &rows)?;

        let h1 = self.layers[0].forward(s, embedded)?;
        let h1 = s.dropout(h1, self.dropout_p)?;
        let h2 = self.layers[1].forward(s, h1)?;
        let h2 = s.dropout(h2, self.dropout_p)?;
        let words = s.tape.concat_last(&[h1, h2])?;

        let mask: Vec<bool> = tokens.iter().map(|&t| t != PAD).collect();
        let last_idx = mask.iter().rposition(|&m| m).unwrap_or(tokens.len() - 1);
        let last = s.tape.gather_rows(words, &[Some(last_idx)])?;
        Ok(EncodedQuestion { words, last, mask })
    }
}

/// Eager encoder: per-word features `[T x 2h]` and the last-word feature `[2h]`.
pub fn encode_question(tokens: &[usize], encoder: &QuestionEncoder) -> Result<(Tensor, Tensor)> {
    let mut s = Session::eval();
    let enc = encoder.encode(&mut s, tokens)?;
    let last = s.value(enc.last);
    Ok((s.value(enc.words).clone(), last.reshape(&[last.numel()])?))
}

/// Pads with [`PAD`] or truncates to exactly `len` tokens.
pub fn pad_tokens(tokens: &[usize], len: usize) -> Vec<usize> {
    let mut out: Vec<usize> = tokens.iter().copied().take(len).collect();
    out.resize(len, PAD);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step_matches_closed_form_cell() {
        // All weights zero; biases pin each gate's pre-activation.
        // The forget gate multiplies a zero cell state on the first step.
        let (bi, bf, bg, bo) = (0.3, -0.7, 1.1, 2.0);
        let layer = LstmLayer {
            w_ih: Tensor::zeros(&[2, 4]),
            w_hh: Tensor::zeros(&[1, 4]),
            b: Tensor::vector(vec![bi, bf, bg, bo]).unwrap(),
        };
        let mut s = Session::eval();
        let x = s.input(Tensor::matrix(1, 2, vec![0.4, -0.2]).unwrap());
        let h = layer.forward(&mut s, x).unwrap();
        // c = f*0 + i*g, h = o*tanh(c)
        let c = sigmoid(bf) * 0.0 + sigmoid(bi) * bg.tanh();
        let expect = sigmoid(bo) * c.tanh();
        assert!((s.value(h).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn all_pad_sequence_is_zero_input_trajectory() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = QuestionEncoder::random(10, 4, 3, 0.0, &mut rng);
        let (words, last) = encode_question(&[PAD; 5], &enc).unwrap();

        // Same trajectory driven by explicit zero inputs.
        let mut s = Session::eval();
        let zeros = s.input(Tensor::zeros(&[5, 4]));
        let h1 = enc.layers[0].forward(&mut s, zeros).unwrap();
        let h2 = enc.layers[1].forward(&mut s, h1).unwrap();
        let expect = Tensor::concat_last(&[s.value(h1), s.value(h2)]).unwrap();
        assert_eq!(words, expect);
        assert_eq!(last.data(), expect.row(4));
        assert_eq!(encode_question(&[PAD; 5], &enc).unwrap().0, words);
    }

    #[test]
    fn last_word_is_final_non_pad_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = QuestionEncoder::random(10, 4, 3, 0.0, &mut rng);
        let (words, last) = encode_question(&[3, 7, 2, PAD, PAD], &enc).unwrap();
        assert_eq!(words.shape(), &[5, 6]);
        assert_eq!(last.data(), words.row(2));
    }

    #[test]
    fn out_of_vocabulary_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = QuestionEncoder::random(10, 4, 3, 0.0, &mut rng);
        assert!(matches!(
            encode_question(&[1, 10], &enc),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn pad_and_truncate() {
        assert_eq!(pad_tokens(&[4, 5], 4), vec![4, 5, PAD, PAD]);
        assert_eq!(pad_tokens(&[1, 2, 3], 2), vec![1, 2]);
    }
}
