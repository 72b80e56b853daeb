//! Small configuration shared by the end-to-end tests.

/// Every section shrunk so a full pipeline finishes in seconds.
pub const TINY: &str = r#"
seed = 3

[data]
n_pairs = 160
test_pairs = 16
vocab_size = 14
len_range = [2, 6]

[teacher]
kind = "transformer"
layers = 1
hidden = 8
embed = 8
heads = 2
ff = 16

[student]
kind = "recurrent"
layers = 1
hidden = 8
embed = 8

[teacher_train]
iterations = 20
batch_size = 8
valid_interval = 10
valid_max_len = 10
optimizer = { base_lr = 0.01, warmup = 5 }

[distill]
iterations = 12
batch_size = 4
pool_period = 2
gen_max_len = 10
valid_interval = 6
valid_max_len = 10
generation = { kind = "topk", k = 3 }
optimizer = { base_lr = 0.01, warmup = 4 }

[seqkd]
beam = 2
max_len = 10

[seqinter]
beam = 2
max_len = 10
train = { iterations = 6, batch_size = 4, valid_interval = 3, valid_max_len = 10 }

[decode]
strategy = "greedy"
max_len = 10

[bench]
beams = [1, 2]
sentences = 4
passes = 3
max_len = 10

[dagger]
horizons = [4, 8]
trials = 20
eval_rollouts = 5
"#;
