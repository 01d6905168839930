"""Multichannel speech enhancement with a channel-attention dense U-Net.

Everything numerical is built on the small reverse-mode autodiff core in
cadunet.autodiff; cadunet.oracles holds independent re-derivations used to
cross-check the main code paths.
"""

__version__ = "0.1.0"
