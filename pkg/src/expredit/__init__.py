"""Expression editing with a controllable expression code on synthetic faces."""

__version__ = "0.1.0"
