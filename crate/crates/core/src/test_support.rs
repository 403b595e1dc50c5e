use crate::corpus::FunctionSample;
use crate::hls_model::ModelConfig;
use crate::segmenter::{encode, CTokenizer, EncodedSample, Vocab};
use crate::te_encoder::EncoderConfig;
use crate::token2statement::T2SKind;

const SNIPPETS: [&str; 6] = [
    "int add(int a, int b) {\n  int c = a + b;\n  return c;\n}",
    "void copy(char *dst, const char *src) {\n  char buf[16];\n  strcpy(buf, src);\n  memcpy(dst, buf, 16);\n}",
    "static int max(int x, int y) {\n  if (x > y)\n    return x;\n  return y;\n}",
    "size_t len(const char *s) {\n  size_t n = 0;\n  while (s[n] != 0)\n    n++;\n  return n;\n}",
    "void zero(int *p, int n) {\n  for (int i = 0; i < n; i++)\n    p[i] = 0;\n}",
    "int read_input(void) {\n  char line[8];\n  gets(line);\n  return atoi(line);\n}",
];

pub(crate) fn tiny_corpus() -> Vec<FunctionSample> {
    SNIPPETS
        .iter()
        .enumerate()
        .map(|(i, code)| {
            let vul = matches!(i, 1 | 5);
            FunctionSample {
                id: format!("f{i}"),
                code: code.to_string(),
                label: u8::from(vul),
                vul_lines: if vul { vec![3] } else { vec![] },
                cwe: None,
            }
        })
        .collect()
}

pub(crate) fn tiny_encoded() -> (Vocab, Vec<EncodedSample>) {
    let corpus = tiny_corpus();
    let vocab = Vocab::build(corpus.iter().map(|s| s.code.as_str()), &CTokenizer, 1000, 1).unwrap();
    let enc = corpus.iter().map(|s| encode(s, &vocab, &CTokenizer, 512).unwrap()).collect();
    (vocab, enc)
}

pub(crate) fn tiny_config(vocab_size: usize, t2s: T2SKind) -> ModelConfig {
    let encoder = EncoderConfig {
        layers: 1,
        hidden: 16,
        heads: 2,
        ffn: 32,
        max_positions: 512,
        dropout: 0.0,
        vocab_size,
    };
    ModelConfig::new(encoder, 512, t2s)
}
