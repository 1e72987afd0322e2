"""
hetmt: regressão MR->CT e segmentação de órgãos numa rede dual-task com
incerteza intrínseca (heteroscedástica) e de parâmetros (MC dropout).
"""

__version__ = "0.1.0"
