"""Optional adapter for Hugging Face causal LMs with Llama/Qwen-style blocks.

Text only: media pieces are rendered as literal ``<image>``-style markers.
Vision-language adapters are expected to subclass and override
``encode_pieces`` / ``_forward`` to splice real media embeddings.

The attention-side residual stream is captured with a forward pre-hook on
each block's ``post_attention_layernorm`` (its input is exactly
``h + Attn(LN(h))``); the MLP-side stream is the block output.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from tapret.backend.base import LAST, Backend, BackendDescriptor, Piece, SubLayerTap, Sublayer, TokenSequence


def _decoder_layers(model):
    for path in ("model.layers", "model.language_model.layers", "transformer.h"):
        obj = model
        try:
            for attr in path.split("."):
                obj = getattr(obj, attr)
        except AttributeError:
            continue
        return list(obj)
    raise ValueError("cannot locate decoder layers on this model")


class HFBackend(Backend):
    def __init__(self, model, tokenizer, name: str = "hf"):
        import torch

        self._torch = torch
        self.model = model.eval()
        self.tokenizer = tokenizer
        self.layers = _decoder_layers(model)
        for layer in self.layers:
            if not hasattr(layer, "post_attention_layernorm"):
                raise ValueError("adapter expects pre-norm blocks with post_attention_layernorm")
        head = model.get_output_embeddings().weight.detach().to(torch.float64).cpu().numpy()
        self._unembed = np.ascontiguousarray(head.T)
        self._unembed.flags.writeable = False
        cfg = model.config
        self.descriptor = BackendDescriptor(
            id=f"hf({name})",
            n_layers=len(self.layers),
            d_model=self._unembed.shape[0],
            vocab_size=self._unembed.shape[1],
        )

    @classmethod
    def from_pretrained(cls, model_name: str, dtype: str = "float32", device: str = "cpu"):
        import torch
        from transformers import AutoModelForCausalLM, AutoTokenizer

        tok = AutoTokenizer.from_pretrained(model_name)
        model = AutoModelForCausalLM.from_pretrained(model_name, torch_dtype=getattr(torch, dtype))
        return cls(model.to(device), tok, name=model_name)

    def tokenize(self, text: str) -> list[int]:
        return list(self.tokenizer.encode(text, add_special_tokens=False))

    def decode(self, ids: Iterable[int]) -> str:
        return self.tokenizer.decode(list(ids))

    def encode_pieces(self, pieces: Sequence[Piece]) -> TokenSequence:
        text = "".join(p.payload if p.kind == "text" else f"<{p.kind}>" for p in pieces)
        ids = list(self.tokenizer.encode(text))
        return TokenSequence(ids, text=text)

    def unembedding(self) -> np.ndarray:
        return self._unembed

    def _forward(self, ids, taps, media_slots=()):
        torch = self._torch
        attn_streams: dict[int, object] = {}
        mlp_streams: dict[int, object] = {}
        handles = []
        for idx, layer in enumerate(self.layers, start=1):
            def pre_hook(_mod, args, idx=idx):
                attn_streams[idx] = args[0].detach()

            def post_hook(_mod, _args, output, idx=idx):
                out = output[0] if isinstance(output, tuple) else output
                mlp_streams[idx] = out.detach()

            handles.append(layer.post_attention_layernorm.register_forward_pre_hook(pre_hook))
            handles.append(layer.register_forward_hook(post_hook))
        try:
            with torch.no_grad():
                inp = torch.tensor([list(ids)], device=self.model.device)
                out = self.model(input_ids=inp, output_hidden_states=True)
        finally:
            for h in handles:
                h.remove()
        embeds = out.hidden_states[0]
        states = {}
        for tap in taps:
            if tap.layer == 0:
                src = embeds
            elif tap.sublayer is Sublayer.ATTN:
                src = attn_streams[tap.layer]
            else:
                src = mlp_streams[tap.layer]
            pos = -1 if tap.position == LAST else tap.position
            states[tap] = src[0, pos].to(torch.float64).cpu().numpy().copy()
        logits = out.logits[0, -1].to(torch.float64).cpu().numpy().copy()
        return states, logits
