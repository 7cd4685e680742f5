# -*- coding: utf-8 -*-
"""
性能监控模块
记录训练各阶段耗时与进程内存
"""

import os
import time
from collections import deque
from contextlib import contextmanager
from datetime import datetime
from typing import Dict

import psutil

from core.logger import get_logger

logger = get_logger("performance")


class PerformanceMonitor:
    """性能监控器"""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __init__(self):
        if not hasattr(self, 'initialized'):
            self.phase_times: Dict[str, deque] = {}
            self.error_count = 0
            self.start_time = time.time()
            self.process = psutil.Process(os.getpid())
            self.initialized = True

    def reset(self):
        """清空已记录的阶段耗时"""
        self.phase_times = {}
        self.error_count = 0
        self.start_time = time.time()

    @contextmanager
    def phase(self, name: str):
        """
        计时上下文管理器

        Args:
            name: 阶段名称，如 "sampling" / "scoring" / "optimization"
        """
        start = time.perf_counter()
        try:
            yield
        finally:
            self.record_phase(name, time.perf_counter() - start)

    def record_phase(self, name: str, seconds: float):
        """记录一次阶段耗时"""
        if name not in self.phase_times:
            self.phase_times[name] = deque(maxlen=1000)
        self.phase_times[name].append(seconds)

    def record_error(self):
        self.error_count += 1

    def last_ms(self, *names: str) -> float:
        """指定阶段最近一次耗时之和（毫秒）"""
        return sum(self.phase_times[n][-1] * 1000.0 for n in names if self.phase_times.get(n))

    def memory_mb(self) -> float:
        """当前进程常驻内存（MB）"""
        return self.process.memory_info().rss / (1024 * 1024)

    def get_current_metrics(self) -> Dict:
        """获取当前性能指标"""
        phases = {}
        for name, times in self.phase_times.items():
            if times:
                phases[name] = {
                    'avg_ms': round(sum(times) / len(times) * 1000, 3),
                    'max_ms': round(max(times) * 1000, 3),
                    'count': len(times)
                }
        return {
            'phases': phases,
            'rss_mb': round(self.memory_mb(), 2),
            'error_count': self.error_count,
            'uptime_seconds': round(time.time() - self.start_time, 2)
        }

    def system_info(self) -> Dict:
        """主机信息，写入运行清单"""
        memory = psutil.virtual_memory()
        return {
            'cpu_count': psutil.cpu_count(logical=True),
            'total_memory_mb': round(memory.total / (1024 * 1024), 1),
            'rss_mb': round(self.memory_mb(), 2),
            'timestamp': datetime.now().isoformat()
        }


# 全局性能监控器实例
performance_monitor = PerformanceMonitor()
