# -*- coding: utf-8 -*-
"""
训练方法包
每个模块定义一个 MethodBase 子类，由 core.method_system.MethodRegistry 自动发现
"""

__all__ = []
