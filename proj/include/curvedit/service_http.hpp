#pragma once

#include <httplib.h>

#include "curvedit/service.hpp"

namespace curvedit {

inline void EditService::install(httplib::Server& server) {
  auto handler = [this](const httplib::Request& req, httplib::Response& res) {
    // The raw target keeps the URL query; req.params also absorbs form-encoded bodies.
    const std::string& path = req.target.empty() ? req.path : req.target;
    const ApiResponse r = dispatch(req.method, path, req.body, req.get_header_value("Accept"));
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  server.Get(R"(/.*)", handler);
  server.Post(R"(/.*)", handler);
}

}  // namespace curvedit
