"""MindDecoder.

Decodes ROI-structured fMRI responses into captions with a trainable encoder, a frozen
visual-proxy alignment target and a frozen language decoder bridged by cross-attention.
The end-to-end pipeline is exposed as a LangGraph graph.
"""

__all__ = ["graph"]


def __getattr__(name: str):
    # the graph pulls in langgraph and every pipeline module, so it is only built on first access
    if name == "graph":
        from mind_decoder.graph import graph

        return graph
    raise AttributeError(f"module 'mind_decoder' has no attribute {name!r}")
