#!/usr/bin/env python

"""
This module provides Workflow, the base of all multi-step workflows.
"""

import logging
from types import SimpleNamespace
from typing import Any, Callable, Dict, List


class Workflow:
    """
    Run a fixed outline of steps sharing a context.

    Subclasses implement define() returning the outline, a list of bound
    methods. Steps exchange state through self.ctx and publish results
    with self.out().
    """

    def __init__(self):
        self.ctx = SimpleNamespace()
        self.outputs: Dict[str, Any] = {}
        self.logger = logging.getLogger(type(self).__module__)

    def define(self) -> List[Callable[[], None]]:
        raise NotImplementedError

    def report(self, message:str):
        self.logger.info(message)

    def banner(self, title:str):
        line = "# " + "-" * (len(title))
        self.report(line)
        self.report("# " + title)
        self.report(line)

    def out(self, name:str, value:Any):
        self.outputs[name] = value

    def run(self) -> Dict[str, Any]:
        for step in self.define():
            step()
        return self.outputs
