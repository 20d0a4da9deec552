"""memorySite URL Configuration

The `urlpatterns` list routes URLs to views. For more information please see:
    https://docs.djangoproject.com/en/4.2/topics/http/urls/
"""
from django.urls import path, include

handler404 = "memoryApp.views.handler404"

urlpatterns = [
    path("", include("memoryApp.urls")),
]
