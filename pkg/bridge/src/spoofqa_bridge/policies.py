"""Scripted reply policies for the echo-mock backend.

Deterministic by construction so client suites can assert exact outcomes:
``fixed`` always answers the same string, ``alternating`` cycles through a
reply list in request order, ``hash`` keys the reply off the wav path so it
is stable across restarts and request order.
"""

from __future__ import annotations

import hashlib


class ReplyPolicy:
    def reply(self, wav_path: str, prompt: str) -> str:
        raise NotImplementedError


class FixedPolicy(ReplyPolicy):
    def __init__(self, text: str):
        self.text = text

    def reply(self, wav_path: str, prompt: str) -> str:
        return self.text


class AlternatingPolicy(ReplyPolicy):
    def __init__(self, replies: tuple[str, ...] = ("bonafide", "spoof")):
        if not replies:
            raise ValueError("need at least one reply")
        self.replies = tuple(replies)
        self.counter = 0

    def reply(self, wav_path: str, prompt: str) -> str:
        text = self.replies[self.counter % len(self.replies)]
        self.counter += 1
        return text


class HashPolicy(ReplyPolicy):
    """Keyed by wav_path digest; restart-stable and order-independent."""

    def __init__(self, replies: tuple[str, ...] = ("bonafide", "spoof")):
        if not replies:
            raise ValueError("need at least one reply")
        self.replies = tuple(replies)

    def reply(self, wav_path: str, prompt: str) -> str:
        digest = hashlib.sha256(wav_path.encode("utf-8")).digest()
        return self.replies[digest[0] % len(self.replies)]


def make_policy(spec: str) -> ReplyPolicy:
    """Parse a policy spec: fixed:<text> | alternating[:a,b,...] | hash[:a,b,...]"""
    kind, _, arg = spec.partition(":")
    if kind == "fixed":
        if not arg:
            raise ValueError("fixed policy needs a reply string, e.g. fixed:bonafide")
        return FixedPolicy(arg)
    if kind == "alternating":
        return AlternatingPolicy(tuple(arg.split(",")) if arg else ("bonafide", "spoof"))
    if kind == "hash":
        return HashPolicy(tuple(arg.split(",")) if arg else ("bonafide", "spoof"))
    raise ValueError(f"unknown policy {spec!r}")
