"""
THC：基于 Transformer 的层次聚类脑网络分类
"""
__version__ = '0.1.0'
