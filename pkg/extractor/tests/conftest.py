import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CHARS = "abcdefghijklmnopqrstuvwxyz0123456789 =+-*()\n.:_,ABCDEF\"'[]<>!"


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory) -> Path:
    """A deterministic sub-200M causal LM plus matching fast tokenizer on disk."""
    import torch
    from tokenizers import Tokenizer, models, pre_tokenizers
    from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

    vocab = {"<unk>": 0, "<pad>": 1, "<bos>": 2}
    for ch in CHARS:
        vocab.setdefault(ch, len(vocab))
    tok = Tokenizer(models.WordLevel(vocab, unk_token="<unk>"))
    tok.pre_tokenizer = pre_tokenizers.Split("", "isolated")
    fast = PreTrainedTokenizerFast(tokenizer_object=tok, unk_token="<unk>",
                                   pad_token="<pad>", bos_token="<bos>")

    config = GPT2Config(vocab_size=len(vocab), n_positions=512, n_embd=32,
                        n_layer=2, n_head=2, bos_token_id=2, eos_token_id=2)
    torch.manual_seed(1234)
    model = GPT2LMHeadModel(config)
    model.eval()

    out = tmp_path_factory.mktemp("tiny-model")
    model.save_pretrained(out)
    fast.save_pretrained(out)
    return out


def build_corpus(n: int = 50):
    """Tiny function bodies; buggy variants flip the operator on line 1."""
    samples = []
    for i in range(n):
        a = (i * 7) % 23 + 1
        label = i % 2
        op = "-" if label else "+"
        code = (f"def calc{i}(x):\n"
                f"    y = x {op} {a}\n"
                f"    return y")
        samples.append({"sample_id": f"toy-{i:03d}", "code": code, "label": label,
                        "buggy_lines": [1] if label else []})
    return samples


@pytest.fixture(scope="session")
def corpus_path(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("corpus") / "toy.jsonl"
    lines = [json.dumps(s, sort_keys=True) for s in build_corpus(50)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def extracted(tiny_model_dir, corpus_path, tmp_path_factory):
    from repextract.extract import ExtractJob, extract

    out = tmp_path_factory.mktemp("extracted")
    job = ExtractJob(model_id=str(tiny_model_dir), layer_k=2, corpus=str(corpus_path),
                     out_dir=str(out), max_seq_len=256, batch_size=8)
    result = extract(job)
    return out, result
